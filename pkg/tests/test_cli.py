import numpy as np
import pytest

from equilibra.cli import (
    CSV_COLUMNS,
    CliError,
    main,
    parse_config,
    read_history_csv,
    run_benchmark,
    timing_ratio_study,
    write_history_csv,
)


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


BASE_CFG = """
# smallest quadrant run
problem = poisson-quadrants
kappa1 = 5.0
k = 1
m = 1
theta = 0.5
max_levels = {levels}
output_dir = {out}
"""


# --- config parsing ----------------------------------------------------------


def test_parse_config_reads_values_and_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, BASE_CFG.format(levels=2, out=tmp_path)))
    assert cfg["problem"] == "poisson-quadrants"
    assert cfg["kappa1"] == 5.0
    assert cfg["max_levels"] == 2
    assert cfg["estimator"] == "guaranteed"  # default
    assert cfg["vtk"] is False               # default
    assert cfg["workers"] == 1               # default


def test_parse_config_unknown_key_named_in_error(tmp_path):
    path = write_config(tmp_path, "problem = cook\nk = 2\nm = 2\nmax_levels = 1\nkapa1 = 5\n")
    with pytest.raises(CliError, match="kapa1"):
        parse_config(path)


def test_parse_config_rejects_duplicates_bad_bool_and_bad_problem(tmp_path):
    with pytest.raises(CliError, match="duplicate"):
        parse_config(write_config(tmp_path, "k = 1\nk = 2\n"))
    with pytest.raises(CliError, match="boolean"):
        parse_config(write_config(
            tmp_path, "problem = cook\nk = 2\nm = 2\nmax_levels = 1\nvtk = maybe\n"))
    with pytest.raises(CliError, match="problem"):
        parse_config(write_config(tmp_path, "problem = beam\nk = 1\nm = 1\nmax_levels = 1\n"))


def test_parse_config_requires_degrees_and_stop_rule(tmp_path):
    with pytest.raises(CliError, match="'k'"):
        parse_config(write_config(tmp_path, "problem = cook\nm = 2\nmax_levels = 1\n"))
    with pytest.raises(CliError, match="stop rule"):
        parse_config(write_config(tmp_path, "problem = cook\nk = 2\nm = 2\n"))


# --- run + CSV ---------------------------------------------------------------


def test_run_single_level_writes_one_row_csv(tmp_path):
    cfg = parse_config(write_config(tmp_path, BASE_CFG.format(levels=1, out=tmp_path)))
    result, csv_path = run_benchmark(cfg)
    cols, echo = read_history_csv(csv_path)
    assert len(cols["level"]) == 1
    assert echo["problem"] == "poisson-quadrants"
    assert cols["n_dof"][0] == result.history.rows[0].n_dof


def test_csv_round_trip_is_exact(tmp_path):
    cfg = parse_config(write_config(tmp_path, BASE_CFG.format(levels=3, out=tmp_path)))
    result, csv_path = run_benchmark(cfg)
    cols, _ = read_history_csv(csv_path)
    for name in CSV_COLUMNS:
        mem = result.history.column(name)
        assert np.array_equal(cols[name], mem, equal_nan=True), name


def test_run_is_deterministic_across_invocations(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cols = []
    for out in (out_a, out_b):
        cfg = parse_config(write_config(
            tmp_path, BASE_CFG.format(levels=3, out=out), name=f"{out.name}.cfg"))
        run_benchmark(cfg)
        cols.append(read_history_csv(out / "results.csv")[0])
    for name in CSV_COLUMNS:
        if name.startswith("t_"):
            continue  # wall-clock timings are not part of the contract
        assert np.array_equal(cols[0][name], cols[1][name], equal_nan=True), name


def test_run_writes_vtk_meshes(tmp_path):
    cfg = parse_config(write_config(
        tmp_path, BASE_CFG.format(levels=2, out=tmp_path) + "vtk = true\n"))
    run_benchmark(cfg)
    assert (tmp_path / "mesh_0.vtk").exists()
    assert (tmp_path / "mesh_1.vtk").exists()


def test_write_history_rejects_nothing_and_parses_nan(tmp_path):
    from equilibra.adaptivity import ConvergenceHistory, LevelRecord
    h = ConvergenceHistory()
    h.append(LevelRecord(level=0, n_cells=2, n_dof=10, err=np.nan, eta=1.0,
                         eta_flux=1.0, eta_osc=0.0, eta_asym=np.nan,
                         i_eff=np.nan, eoc=np.nan, t_prime=0.1, t_eqlb=0.2,
                         t_tot=0.3))
    path = tmp_path / "h.csv"
    write_history_csv(path, h)
    cols, echo = read_history_csv(path)
    assert echo == {}
    assert np.isnan(cols["err"][0])
    assert cols["t_tot"][0] == 0.3


# --- timing study ------------------------------------------------------------


def test_timing_study_returns_ratio_records():
    records = timing_ratio_study("cook", k=1, m=1, sizes=[2, 4])
    assert [r["n"] for r in records] == [2, 4]
    for rec in records:
        assert rec["t_tot"] == pytest.approx(rec["t_prime"] + rec["t_eqlb"])
        assert 0.0 < rec["ratio"] < 1.0
    assert records[1]["n_dof"] > records[0]["n_dof"]


def test_timing_study_input_validation():
    with pytest.raises(CliError):
        timing_ratio_study("poisson-quadrants", 1, 1, [2, 4])
    with pytest.raises(CliError):
        timing_ratio_study("cook", 1, 1, [4])


# --- entry point -------------------------------------------------------------


def test_main_run_smoke(tmp_path, capsys):
    path = write_config(tmp_path, BASE_CFG.format(levels=1, out=tmp_path))
    assert main(["run", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "results.csv" in out and "i_eff" in out


def test_main_reports_config_errors(tmp_path, capsys):
    path = write_config(tmp_path, "problem = cook\nbogus_key = 1\n")
    assert main(["run", "--config", str(path)]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_main_timing_smoke(capsys):
    assert main(["timing", "--problem", "cook", "--k", "1", "--m", "1",
                 "--sizes", "2,4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("n,n_cells,n_dof")
    assert len(out.strip().splitlines()) == 3
