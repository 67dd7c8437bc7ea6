import json
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

import cptr.bench as bench
from cptr.bench import (MILLIDARCY, CaseConfig, ConfigError, FieldFileError, build_case,
                        load_config, load_field_file, make_config, parse_config_text,
                        run_case, schur_condition_oracle, write_field_file)
from cptr.cli import main
from cptr.discretization import State, assemble_jacobian
from cptr.sparse import read_matrix_market

from conftest import make_model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_parse_config_text():
    vals = parse_config_text("case = heater-2d  # comment\n\n n=40\nscaling = off\n")
    assert vals == {"case": "heater-2d", "n": 40, "scaling": False}
    cfg = make_config(vals, n=80)
    assert cfg.n == 80 and cfg.case == "heater-2d"


def test_case_defaults_then_file_then_overrides():
    cfg = make_config({"case": "crosscoup-2d"})
    assert cfg.n == 40 and cfg.dt_days == 2.0
    cfg = make_config({"case": "crosscoup-2d", "dt_days": 0.1}, coupling_factor=40.0)
    assert cfg.dt_days == 0.1 and cfg.coupling_factor == 40.0


@pytest.mark.parametrize("text,msg", [
    ("n = 4\nbogus = 1", "line 2: unknown key"),
    ("n = four", "expected int"),
    ("just words", "line 1"),
    ("scaling = maybe", "expected bool"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_config_validation():
    with pytest.raises(ConfigError):
        CaseConfig(case="spe10-full")
    with pytest.raises(ConfigError):
        CaseConfig(precond="cpr-jacobi")
    with pytest.raises(ConfigError):
        CaseConfig(order="ilu-first", scaling=False)
    with pytest.raises(ConfigError, match="does not exist"):
        CaseConfig(perm_file="/nonexistent/perm.dat")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_build(path):
    model, state, precond, schedule = build_case(load_config(path))
    assert state.p.size == model.n_cells
    assert schedule.n_steps >= 1


def test_field_file_round_trip_and_units(tmp_path):
    vals = np.random.default_rng(0).lognormal(size=24)
    write_field_file(tmp_path / "f.dat", vals, per_line=5)
    back = load_field_file(tmp_path / "f.dat", 2, 3, 4)
    assert np.array_equal(back, vals)
    (tmp_path / "md.dat").write_text("100 200\n")
    md = load_field_file(tmp_path / "md.dat", 2, 1, 1, unit="millidarcy")
    assert np.allclose(md, [100 * MILLIDARCY, 200 * MILLIDARCY], rtol=1e-15)
    three = load_field_file(tmp_path / "f.dat", 2, 2, 2, components=3)
    assert three.shape == (3, 8)


def test_field_file_errors(tmp_path):
    (tmp_path / "short.dat").write_text("1 2 3\n")
    with pytest.raises(FieldFileError, match="expected 4 values, found 3"):
        load_field_file(tmp_path / "short.dat", 2, 2, 1)
    (tmp_path / "bad.dat").write_text("1 2\n3 x\n")
    with pytest.raises(FieldFileError, match="line 2, field 2"):
        load_field_file(tmp_path / "bad.dat", 2, 2, 1)


def test_perm_file_used_by_case(tmp_path):
    write_field_file(tmp_path / "k.dat", np.full(16, 50.0))
    cfg = make_config({"case": "well-2d-iso", "n": 4, "perm_file": str(tmp_path / "k.dat"),
                       "perm_unit": "millidarcy"})
    model, *_ = build_case(cfg)
    assert np.allclose(model.perm_x, 50 * MILLIDARCY)


def test_csv_deterministic(tmp_path):
    outs = []
    for k in range(2):
        cfg = make_config({"case": "heater-2d", "n": 8, "out": str(tmp_path / f"r{k}.csv")})
        run_case(cfg)
        lines = (tmp_path / f"r{k}.csv").read_text().splitlines()
        outs.append([ln.rsplit(",", 1)[0] for ln in lines])
    assert outs[0] == outs[1]
    header = outs[0][0].split(",")
    assert header[:3] == ["step", "dt", "newton_iters"]
    summary = json.loads((tmp_path / "r0.json").read_text())
    assert summary["status"] == "ok" and summary["config"]["n"] == 8


def test_oracle_matches_independent_dense_schur():
    m = make_model(2, 2, seed=3)
    s = State.uniform(4, 4.1e7, 310.0, 0.7)
    res = schur_condition_oracle(m, s)
    A = assemble_jacobian(m, s, s).matrix.toarray()
    n = 4
    A_pp, A_pT, A_Tp, A_TT = A[:n, :n], A[:n, n:2 * n], A[n:2 * n, :n], A[n:2 * n, n:2 * n]
    S = A_TT - A_Tp @ np.linalg.inv(A_pp) @ A_pT
    assert res["cond_S_T"] == pytest.approx(np.linalg.cond(S), rel=1e-10)


def test_oracle_degenerate_without_pT_coupling(monkeypatch):
    m = make_model(3, 3, seed=1)
    s = State.uniform(9, 4.1e7, 310.0, 0.7)
    real = bench.assemble_jacobian

    def no_pT(model, state, prev):
        sysm = real(model, state, prev)
        A = sysm.matrix.tolil()
        for i in sysm.index("p"):
            A[i, sysm.index("T")] = 0
        return type(sysm)(A.tocsr(), sysm.n_cells, sysm.ordering)

    monkeypatch.setattr(bench, "assemble_jacobian", no_pT)
    res = schur_condition_oracle(m, s)
    assert res["S_ATT"] == pytest.approx(1.0, abs=1e-10)
    assert res["S_diag"] == pytest.approx(1.0, abs=1e-10)


def test_oracle_size_limit():
    m = make_model(3, 3)
    with pytest.raises(ValueError):
        schur_condition_oracle(m, State.uniform(9, 4e7, 300.0, 0.9), max_cells=4)


def _write_cfg(tmp_path, text):
    p = tmp_path / "case.cfg"
    p.write_text(text)
    return str(p)


def test_cli_run(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "case = heater-2d\nn = 8\n")
    out = tmp_path / "out" / "run.csv"
    rc = main(["run", "--config", cfg, "--precond", "cptr-block-amg", "--steps", "1",
               "--scaling", "on", "--out", str(out)])
    assert rc == 0
    assert out.exists() and out.with_suffix(".json").exists()
    assert "cptr-block-amg" in capsys.readouterr().out


def test_cli_rejects_bad_config(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "case = heater-2d\nn = eight\n")
    assert main(["run", "--config", cfg]) == 2
    assert "expected int" in capsys.readouterr().err


def test_cli_oracle(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "case = heater-2d\nn = 5\nsteps = 1\n")
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "o.json")]) == 0
    res = json.loads((tmp_path / "o.json").read_text())
    assert set(res) == {"S_diag", "S_ATT", "S_T", "cond_S_T", "cond_A_TT"}


def test_cli_export_matrix(tmp_path):
    cfg = _write_cfg(tmp_path, "case = well-2d-iso\nn = 4\n")
    base = tmp_path / "m"
    assert main(["export-matrix", "--config", cfg, "--step", "2", "--out", str(base)]) == 0
    A = read_matrix_market(f"{base}_A.mtx")
    assert A.shape == (48, 48)
    assert read_matrix_market(f"{base}_S_T.mtx").shape == (16, 16)
    assert sp.issparse(A)


def test_heater_cpr_amg_average_in_range():
    s = run_case(make_config({"case": "heater-2d", "n": 20, "precond": "cpr-amg"}), write=False)
    assert 4.0 <= s.summary["avg_linear_per_newton"] <= 7.0
