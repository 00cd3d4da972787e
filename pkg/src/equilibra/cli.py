"""Command line interface.

Two subcommands:

    equilibra run --config <file>
        Execute one adaptive benchmark run described by a flat key=value
        config file and write results.csv (plus optional per-level VTK
        meshes) into the output directory.

    equilibra timing --problem cook --k 2 --m 2 --sizes 8,16,32,64
        Solve the named benchmark on uniform structured meshes and report
        the relative equilibration cost t_eqlb / t_tot per mesh size.

The config format is deliberately primitive (one `key = value` pair per
line, `#` comments) so it parses identically on every Python version in
scope. All physical parameters are echoed into the CSV header as comment
lines for provenance.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from equilibra import mesh as msh
from equilibra import primal
from equilibra.adaptivity import AdaptiveConfig, adaptive_loop
from equilibra.benchmarks import COOK_CORNERS, CookProblem, QuadrantProblem
from equilibra.estimation import EstimatorConstants


class CliError(RuntimeError):
    pass


CSV_COLUMNS = [
    "level", "n_cells", "n_dof", "err", "eta", "eta_flux", "eta_osc",
    "eta_asym", "i_eff", "eoc", "t_prime", "t_eqlb", "t_tot",
]

_CONFIG_SCHEMA = {
    # key: (converter, default)
    "problem": (str, None),
    "kappa1": (float, 5.0),
    "k": (int, None),
    "m": (int, None),
    "theta": (float, 0.5),
    "estimator": (str, "guaranteed"),
    "weak_symmetry": (None, False),   # bool, parsed specially
    "max_levels": (int, None),
    "err_tol": (float, None),
    "ck": (float, 1.0),
    "output_dir": (str, "."),
    "vtk": (None, False),             # bool
    "workers": (int, 1),
}

_PROBLEMS = ("poisson-quadrants", "cook")


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise CliError(f"expected a boolean, got {text!r}")


def parse_config(path) -> dict:
    """Read a flat key=value config file into a typed dict."""
    cfg = {key: default for key, (_, default) in _CONFIG_SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip().strip("\"'")
        if key not in _CONFIG_SCHEMA:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise CliError(f"{path}:{lineno}: duplicate config key {key!r}")
        seen.add(key)
        conv = _CONFIG_SCHEMA[key][0]
        try:
            cfg[key] = _parse_bool(value) if conv is None else conv(value)
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    _validate_config(cfg)
    return cfg


def _validate_config(cfg):
    if cfg["problem"] not in _PROBLEMS:
        raise CliError(
            f"config key 'problem' must be one of {_PROBLEMS}, "
            f"got {cfg['problem']!r}"
        )
    for key in ("k", "m"):
        if cfg[key] is None:
            raise CliError(f"config key {key!r} is required")
    if cfg["max_levels"] is None and cfg["err_tol"] is None:
        raise CliError("need a stop rule: set max_levels and/or err_tol")
    if cfg["workers"] < 1:
        raise CliError("config key 'workers' must be >= 1")


def _build_problem(cfg):
    if cfg["problem"] == "poisson-quadrants":
        if cfg["weak_symmetry"]:
            raise CliError("weak_symmetry applies to the cook problem only")
        return QuadrantProblem(kappa1=cfg["kappa1"], workers=cfg["workers"])
    return CookProblem(estimator=cfg["estimator"], workers=cfg["workers"])


def run_benchmark(cfg: dict):
    """Execute one adaptive run; returns (AdaptiveResult, csv_path)."""
    problem = _build_problem(cfg)
    loop_cfg = AdaptiveConfig(
        k=cfg["k"],
        m=cfg["m"],
        theta=cfg["theta"],
        max_levels=cfg["max_levels"],
        err_tol=cfg["err_tol"],
        estimator=cfg["estimator"],
        weak_symmetry=cfg["weak_symmetry"],
        constants=EstimatorConstants(korn=cfg["ck"]),
    )
    result = adaptive_loop(problem, loop_cfg)
    if cfg["problem"] == "cook":
        # the Cook error is only computable against a reference built on
        # the final mesh; fill the err / i_eff / eoc columns post hoc
        problem.attach_reference_errors(result, refinements=1)

    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    write_history_csv(csv_path, result.history, cfg)
    if cfg["vtk"]:
        for level, mesh in enumerate(result.meshes):
            msh.write_vtk(mesh, out_dir / f"mesh_{level}.vtk")
    return result, csv_path


def write_history_csv(path, history, config_echo=None):
    """Write the convergence history; config entries become '# key = value'
    comment lines, numbers use repr precision so parsing round-trips."""
    lines = []
    for key, value in (config_echo or {}).items():
        lines.append(f"# {key} = {value}")
    lines.append(",".join(CSV_COLUMNS))
    for row in history.rows:
        fields = []
        for col in CSV_COLUMNS:
            value = getattr(row, col)
            if col in ("level", "n_cells", "n_dof"):
                fields.append(str(int(value)))
            else:
                fields.append(repr(float(value)))
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_history_csv(path):
    """Parse a results.csv back into (columns dict, config dict)."""
    config, data_lines = {}, []
    header = None
    for raw in Path(path).read_text().splitlines():
        if raw.startswith("#"):
            key, _, value = raw[1:].partition("=")
            config[key.strip()] = value.strip()
        elif header is None:
            header = raw.split(",")
        elif raw.strip():
            data_lines.append(raw.split(","))
    if header != CSV_COLUMNS:
        raise CliError(f"unexpected CSV header in {path}")
    cols = {
        name: np.array([float(row[i]) for row in data_lines])
        for i, name in enumerate(CSV_COLUMNS)
    }
    return cols, config


def timing_ratio_study(problem: str, k: int, m: int, sizes):
    """Relative equilibration cost on uniform meshes.

    Returns a list of dicts with keys n, n_cells, n_dof, t_prime, t_eqlb,
    t_tot, ratio (= t_eqlb / t_tot).
    """
    if problem != "cook":
        raise CliError(f"timing study supports the cook problem, got {problem!r}")
    if len(sizes) < 2:
        raise CliError("timing study needs at least two mesh sizes")
    # time one plain equilibration pass; the optional global-minimization
    # sweeps are an estimator option, not part of the cost baseline
    bench = CookProblem(sweeps=0)
    records = []
    for n in sizes:
        mesh = msh.split_low_valence_boundary(
            msh.create_structured(
                ("quadrilateral", COOK_CORNERS), int(n),
                tagger=lambda mid: "dirichlet" if mid[0] < 1e-10 else "neumann",
            )
        )
        t0 = time.perf_counter()
        u_h = bench.solve(mesh, k)
        t_prime = time.perf_counter() - t0
        t0 = time.perf_counter()
        bench.reconstruct(mesh, u_h, m, weak_symmetry=False)
        t_eqlb = time.perf_counter() - t0
        t_tot = t_prime + t_eqlb
        records.append({
            "n": int(n),
            "n_cells": mesh.n_cells,
            "n_dof": u_h.space.ndofs,
            "t_prime": t_prime,
            "t_eqlb": t_eqlb,
            "t_tot": t_tot,
            "ratio": t_eqlb / t_tot,
        })
    return records


def _cmd_run(args):
    cfg = parse_config(args.config)
    result, csv_path = run_benchmark(cfg)
    final = result.history.rows[-1]
    print(f"wrote {csv_path}")
    print(
        f"levels {len(result.history)}  n_dof {final.n_dof}  "
        f"err {final.err:.6g}  eta {final.eta:.6g}  i_eff {final.i_eff:.3g}"
    )
    return 0


def _cmd_timing(args):
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    records = timing_ratio_study(args.problem, args.k, args.m, sizes)
    print("n,n_cells,n_dof,t_prime,t_eqlb,ratio_percent")
    for rec in records:
        print(
            f"{rec['n']},{rec['n_cells']},{rec['n_dof']},"
            f"{rec['t_prime']:.4f},{rec['t_eqlb']:.4f},{100 * rec['ratio']:.1f}"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="equilibra",
        description="Adaptive FEM benchmarks with equilibrated-flux error estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an adaptive benchmark run")
    p_run.add_argument("--config", required=True, help="key=value config file")
    p_run.set_defaults(func=_cmd_run)

    p_tim = sub.add_parser("timing", help="equilibration cost on uniform meshes")
    p_tim.add_argument("--problem", default="cook")
    p_tim.add_argument("--k", type=int, required=True)
    p_tim.add_argument("--m", type=int, required=True)
    p_tim.add_argument("--sizes", required=True,
                       help="comma-separated structured mesh resolutions")
    p_tim.set_defaults(func=_cmd_timing)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
