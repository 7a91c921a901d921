import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltvar import FeederModel, RuleParams, default_rule, polytopic_check, validate
from voltvar.exceptions import InfeasibleError, ValidationError
from voltvar.feeder import Scenario, ScenarioSet
from voltvar.synthetic import bundled_feeder, bundled_scenarios, random_radial_feeder
from voltvar.trainer import (ALPHA_FLOOR, Adam, Projector, TrainConfig, evaluate,
                             evaluate_detailed, from_c_space, sgd_step, to_c_space, train)
from voltvar.twin import TwinConfig, backward, pack


def test_sgd_step_examples(scalar_model, scalar_rule):
    z = pack(scalar_rule)
    np.testing.assert_array_equal(sgd_step(z, np.zeros_like(z), 0.1), z)
    np.testing.assert_array_equal(sgd_step(z, np.ones_like(z), 0.0), z)
    _, g = backward(scalar_model, TwinConfig(depth=3), z, [[1.06]])
    np.testing.assert_allclose(sgd_step(z, g, 0.05), z - 0.05 * g, rtol=0, atol=0)


def test_adam_first_step_is_sign():
    opt = Adam((2,))
    d = opt.direction(np.array([3.0, -0.5]))
    np.testing.assert_allclose(d, [1.0, -1.0], rtol=1e-7)
    np.testing.assert_array_equal(sgd_step(np.zeros(2), np.zeros(2), 0.1, Adam((2,))), 0.0)


def test_c_space_examples():
    z = np.array([[1.0, 1.0], [2.0, 4.0], [0.0, 0.0], [0.1, 0.1]])
    x, k = to_c_space(z)
    np.testing.assert_array_equal(x[1], [0.5, 0.25]) and k == 0
    x, k = to_c_space(np.array([[1.0], [-0.3], [0.0], [0.1]]))
    assert x[1, 0] == pytest.approx(1.0 / ALPHA_FLOOR) and k == 1


@given(st.integers(0, 2**31))
def test_c_space_roundtrip(seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.01, 10, (4, 50))
    back = from_c_space(to_c_space(z)[0])
    np.testing.assert_allclose(back, z, rtol=1e-12)


def _one_der(vt):
    m = FeederModel(R=[[0.3]], X=[[0.5]], qhat=[0.3])
    return m, ScenarioSet(tuple(Scenario(vtilde=[v]) for v in vt))


def test_evaluate_examples(scalar_model, scalar_rule):
    one = ScenarioSet((Scenario(vtilde=[1.06]),))
    assert evaluate(scalar_model, scalar_rule, one) == pytest.approx(8e-4, abs=1e-14)
    m = bundled_feeder()
    rng = np.random.default_rng(0)
    dead = rng.uniform(0.981, 1.019, (10, m.n_nodes))
    d = default_rule(m.qhat, m.qhat > 0)
    assert evaluate(m, d, dead) == evaluate(m, None, dead)
    z = RuleParams(vref=d.vref, delta=d.delta, sigma=d.sigma, qbar=np.zeros(m.n_nodes), qhat=m.qhat,
                   der_mask=d.der_mask)
    sc = bundled_scenarios(m)
    assert evaluate(m, z, sc) == evaluate(m, None, sc)


def test_evaluate_threads_identical():
    m = bundled_feeder()
    sc = bundled_scenarios(m)
    d = default_rule(m.qhat, m.qhat > 0)
    a = evaluate_detailed(m, d, sc)
    b = evaluate_detailed(m, d, sc, threads=4)
    np.testing.assert_array_equal(a.q_star, b.q_star)
    assert a.objective == b.objective


def test_evaluate_reports_failures():
    X = np.array([[0.2, 0.2], [0.2, 0.4]])
    m = FeederModel(R=X, X=X)
    p = RuleParams(vref=[1.0, 1.0], delta=[0.0, 0.0], sigma=[0.02, 0.02], qbar=[0.5, 0.5],
                   qhat=[0.5, 0.5])
    ev = evaluate_detailed(m, p, [[1.05, 1.05], [1.0, 1.0]])
    assert ev.failed == [0] and ev.objective == 0.0


def test_config_validation():
    for bad in (dict(lr=-1), dict(lr=0.0), dict(epsilon=1.0), dict(optimizer="sgd"), dict(batch_size=0)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_zero_deviation_stays_optimal():
    m, sc = _one_der([1.0, 1.0, 1.0])
    init = default_rule(m.qhat)
    rep = train(m, sc, TrainConfig(epochs=5, z_init=init))
    assert all(L == 0.0 for L in rep.loss_per_epoch)


def test_epochs_zero_returns_projected_init():
    m = bundled_feeder()
    sc = bundled_scenarios(m)
    rep = train(m, sc, TrainConfig(epochs=0))
    assert rep.loss_per_epoch == []
    for k in ("vref", "delta", "sigma", "qbar"):
        np.testing.assert_array_equal(getattr(rep.final_params, k), getattr(rep.initial_params, k))
    assert validate(rep.final_params, tol=1e-9) == []
    # (0.95, 0.1, 0.3, 1.5) lies outside the box, so projection moved it
    assert np.all(rep.initial_params.delta[m.qhat > 0] <= 0.03 + 1e-12)


def test_training_invariants_and_ordering():
    m = bundled_feeder()
    sc = bundled_scenarios(m)
    seen = []
    proj = Projector(m, m.qhat, m.qhat > 0, 0.5)

    def cb(epoch, z):
        seen.append(proj.residual(to_c_space(z)[0]))

    cfg = TrainConfig(epochs=15, batch_size=5, epsilon=0.5)
    rep = train(m, sc, cfg, callback=cb)
    assert max(seen) <= 1e-8 and max(rep.residual_per_epoch) <= 1e-8
    p = rep.final_params
    assert validate(p, tol=1e-9) == []
    assert polytopic_check(m, p.alpha, 0.5, tol=1e-9)
    assert rep.certificate.spectral_pass and rep.certificate.spectral_norm <= 0.5 + 1e-12
    none = evaluate(m, None, sc)
    dflt = evaluate(m, default_rule(m.qhat, m.qhat > 0), sc)
    opt = evaluate(m, p, sc)
    assert opt <= dflt <= none
    d = rep.as_dict()
    assert {"loss_per_epoch", "final_params", "certificate"} <= set(d)
    assert "wall_clock_per_epoch" not in d and len(rep.wall_clock) == 15


def test_training_is_deterministic():
    m = bundled_feeder()
    sc = bundled_scenarios(m)
    cfg = TrainConfig(epochs=4, batch_size=3, seed=11)
    a, b = train(m, sc, cfg).as_dict(), train(m, sc, cfg).as_dict()
    assert a == b


def test_plain_mode_single_step_matches_gradient():
    m, sc = _one_der([1.04])
    init = RuleParams(vref=[1.0], delta=[0.01], sigma=[0.1], qbar=[0.05], qhat=[0.3])
    cfg = TrainConfig(epochs=1, lr=1e-4, optimizer="plain", z_init=init, depth=8, batch_size=1)
    rep = train(m, sc, cfg)
    _, g = backward(m, TwinConfig(depth=8), pack(init), sc.vtilde)
    np.testing.assert_allclose(pack(rep.final_params)[:, 0], pack(init)[:, 0] - 1e-4 * g[:, 0],
                               rtol=1e-12)


def test_infeasible_design_is_reported():
    m, sc = _one_der([1.04])
    init = RuleParams(vref=[1.0], delta=[0.01], sigma=[0.1], qbar=[0.0], qhat=[0.0],
                      der_mask=[True])
    with pytest.raises(InfeasibleError):
        train(m, sc, TrainConfig(epochs=1, z_init=init))


def test_training_beats_baselines_on_random_feeder():
    rng = np.random.default_rng(3)
    m = random_radial_feeder(rng, 5, qhat=np.array([0.0, 0.2, 0.0, 0.2, 0.2]))
    vt = 1.02 + rng.uniform(0, 0.04, (12, 5))
    rep = train(m, vt, TrainConfig(epochs=20, batch_size=4))
    assert evaluate(m, rep.final_params, vt) <= evaluate(m, None, vt)
