import csv
import json

import numpy as np
import pytest

from voltvar import polytopic_check
from voltvar.cli import main
from voltvar.feeder import load_model, load_scenarios
from voltvar.io import load_rules, read_trace, save_rules
from voltvar.rules import RuleParams, default_rule
from voltvar.synthetic import bundled_paths


@pytest.fixture
def paths():
    return bundled_paths()


@pytest.fixture
def small(tmp_path):
    """Three-bus line with inverters at buses 2 and 3 and a handful of high-voltage hours."""
    feeder = {"root": "0", "v0": 1.0, "qhat": {"2": 0.2, "3": 0.2},
              "lines": [{"from": "0", "to": "1", "r": 0.02, "x": 0.01},
                        {"from": "1", "to": "2", "r": 0.02, "x": 0.01},
                        {"from": "2", "to": "3", "r": 0.02, "x": 0.01}]}
    fp = tmp_path / "small.json"
    fp.write_text(json.dumps(feeder))
    sp = tmp_path / "small.csv"
    rng = np.random.default_rng(3)
    with open(sp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vtilde_1", "vtilde_2", "vtilde_3"])
        for _ in range(6):
            w.writerow([repr(float(x)) for x in 1.0 + np.sort(rng.uniform(0.0, 0.05, 3))])
    return fp, sp


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_feeder_validate(paths, tmp_path, capsys):
    assert main(["feeder-validate", "--feeder", str(paths["feeder"])]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "single-phase" and info["n_nodes"] == 8
    out = tmp_path / "v.json"
    assert main(["feeder-validate", "--feeder", str(paths["feeder"]),
                 "--scenarios", str(paths["scenarios"]), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["scenarios"]["count"] == 20
    man = json.loads((tmp_path / "v.json.manifest.json").read_text())
    assert set(man) >= {"command", "config", "inputs", "seed", "tool_version", "timestamp", "output"}


def test_missing_scenarios_file(paths, tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    rc = main(["evaluate", "--feeder", str(paths["feeder"]), "--scenarios", str(missing)])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_required_flag(paths, capsys):
    assert main(["simulate", "--feeder", str(paths["feeder"])]) == 2
    assert "--rules" in capsys.readouterr().err


def test_stability_keys(paths, tmp_path, capsys):
    m = load_model(paths["feeder"])
    rp = tmp_path / "d.json"
    save_rules(default_rule(m.qhat, m.qhat > 0), rp)
    assert main(["stability", "--feeder", str(paths["feeder"]), "--rules", str(rp)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"polytopic_pass", "min_depth_for"} <= set(out)
    assert out["min_depth_for"]["T"] >= 1


def test_simulate_unstable_rule_reports(paths, tmp_path):
    m = load_model(paths["feeder"])
    n = m.n_nodes
    steep = RuleParams(vref=np.ones(n), delta=np.zeros(n), sigma=np.full(n, 0.02),
                       qbar=np.full(n, 0.2) * (m.qhat > 0), qhat=m.qhat, der_mask=m.qhat > 0)
    assert not polytopic_check(m, steep.alpha, 1e-9)
    rp = tmp_path / "steep.json"
    save_rules(steep, rp)
    out = tmp_path / "trace.csv"
    rc = main(["simulate", "--feeder", str(paths["feeder"]), "--rules", str(rp),
               "--scenarios", str(paths["scenarios"]), "--steps", "200", "--out", str(out)])
    assert rc == 0
    summary = json.loads((tmp_path / "trace.csv.summary.json").read_text())
    assert summary["converged"] is False
    t, q, v = read_trace(out)
    assert q.shape == v.shape and q.shape[1] == n


def test_equilibrium_methods_agree(small, tmp_path, capsys):
    fp, sp = small
    m = load_model(fp)
    rp = tmp_path / "d.json"
    save_rules(default_rule(m.qhat, m.qhat > 0), rp)
    got = {}
    for method in ("fixed-point", "coordinate-descent", "enumerate"):
        assert main(["equilibrium", "--feeder", str(fp), "--rules", str(rp), "--scenarios", str(sp),
                     "--scenario-index", "2", "--method", method]) == 0
        got[method] = json.loads(capsys.readouterr().out)
    for d in got.values():
        np.testing.assert_allclose(d["q_star"], got["enumerate"]["q_star"], atol=1e-9)
        assert d["kkt_residual"] <= 1e-9


def test_design_epochs_zero_is_projected_init(paths, tmp_path):
    out = tmp_path / "r.json"
    rc = main(["design", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
               "--epochs", "0", "--out", str(out), "--report", str(tmp_path / "rep.json")])
    assert rc == 0
    p = load_rules(out)
    m = load_model(paths["feeder"])
    assert polytopic_check(m, p.alpha, 0.5, tol=1e-9)
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["design_check"]["polytopic_pass"] and rep["design_check"]["violations"] == []
    assert rep["loss_per_epoch"] == []


def test_design_deterministic(paths, tmp_path):
    outs = []
    for k in range(2):
        out, rep = tmp_path / f"r{k}.json", tmp_path / f"rep{k}.json"
        assert main(["design", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                     "--epochs", "3", "--seed", "7", "--out", str(out), "--report", str(rep)]) == 0
        outs.append((out.read_bytes(), rep.read_bytes()))
    assert outs[0] == outs[1]


def test_design_infeasible_exit(paths, tmp_path, capsys):
    m = load_model(paths["feeder"])
    mask = m.qhat > 0
    qhat = m.qhat.copy()
    qhat[np.flatnonzero(mask)[0]] = 0.0
    init = RuleParams(vref=np.ones(8), delta=np.zeros(8), sigma=np.full(8, 0.1), qbar=np.zeros(8),
                      qhat=qhat, der_mask=mask)
    ip = tmp_path / "init.json"
    save_rules(init, ip)
    rc = main(["design", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
               "--init", str(ip), "--epochs", "1", "--out", str(tmp_path / "r.json")])
    assert rc == 3
    assert "binding" in capsys.readouterr().err


def test_evaluate_and_verify(paths, tmp_path, capsys):
    m = load_model(paths["feeder"])
    rp = tmp_path / "d.json"
    save_rules(default_rule(m.qhat, m.qhat > 0), rp)
    assert main(["evaluate", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"])]) == 0
    none = json.loads(capsys.readouterr().out)
    assert main(["evaluate", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                 "--rules", str(rp), "--threads", "3"]) == 0
    dflt = json.loads(capsys.readouterr().out)
    assert dflt["objective"] <= none["objective"] and dflt["failed"] == []
    assert main(["verify", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                 "--rules", str(rp)]) == 0
    ver = json.loads(capsys.readouterr().out)
    assert ver["pass"] and len(ver["residuals"]) == 20


def test_oracle_outputs(small, tmp_path, capsys):
    fp, sp = small
    out = tmp_path / "best.json"
    assert main(["oracle", "--feeder", str(fp), "--scenarios", str(sp), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    rows = _rows(tmp_path / "best.json.grid.csv")
    assert len(rows) == summary["candidates"]
    objs = [float(r["objective"]) for r in rows]
    assert min(objs) == pytest.approx(summary["objective"])
    assert int(np.argmin(objs)) == summary["best_index"]
    p = load_rules(out)
    assert p.der_mask.tolist() == [False, True, True]


def test_profile_columns(paths, tmp_path):
    m = load_model(paths["feeder"])
    rp, out = tmp_path / "opt.json", tmp_path / "prof.csv"
    assert main(["design", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                 "--epochs", "30", "--out", str(rp)]) == 0
    assert main(["profile", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                 "--rules", str(rp), "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 20 * m.n_nodes
    dev = {c: np.mean([abs(float(r[c]) - 1.0) for r in rows]) for c in ("v_none", "v_default", "v_optimized")}
    assert dev["v_optimized"] <= dev["v_default"] <= dev["v_none"]


def test_profile_deadband_and_zero_capability(tmp_path):
    feeder = {"kind": "single-phase", "v0": 1.0, "R": [[0.02, 0.02], [0.02, 0.04]],
              "X": [[0.02, 0.02], [0.02, 0.04]], "qhat": [0.2, 0.2]}
    fp = tmp_path / "f.json"
    fp.write_text(json.dumps(feeder))
    sp = tmp_path / "s.csv"
    sp.write_text("vtilde_1,vtilde_2\n1.01,0.99\n1.0,1.015\n")
    m = load_model(fp)
    rp = tmp_path / "r.json"
    save_rules(default_rule(m.qhat, m.qhat > 0), rp)
    out = tmp_path / "p.csv"
    assert main(["profile", "--feeder", str(fp), "--scenarios", str(sp), "--rules", str(rp),
                 "--out", str(out)]) == 0
    for r in _rows(out):
        assert r["v_default"] == r["v_none"]
    # no capability anywhere: every rule is inert
    zero = RuleParams(vref=[1.0, 1.0], delta=[0.0, 0.0], sigma=[0.1, 0.1], qbar=[0.0, 0.0],
                      qhat=[0.0, 0.0], der_mask=[True, True])
    save_rules(zero, rp)
    sp.write_text("vtilde_1,vtilde_2\n1.08,1.09\n")
    assert main(["profile", "--feeder", str(fp), "--scenarios", str(sp), "--rules", str(rp),
                 "--out", str(out)]) == 0
    for r in _rows(out):
        assert r["v_none"] == r["v_default"] == r["v_optimized"]


def test_outputs_round_trip(paths, tmp_path):
    m = load_model(paths["feeder"])
    scen = load_scenarios(paths["scenarios"], m)
    out = tmp_path / "r.json"
    assert main(["design", "--feeder", str(paths["feeder"]), "--scenarios", str(paths["scenarios"]),
                 "--epochs", "2", "--out", str(out)]) == 0
    p = load_rules(out)
    save_rules(p, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == out.read_bytes()
    assert len(scen) == 20
