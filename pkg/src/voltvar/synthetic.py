"""Random feeders, rules and scenarios, plus the bundled example instance."""
from __future__ import annotations

from importlib import resources

import numpy as np

from .feeder import (MULTIPHASE, FeederModel, ScenarioSet, build_radial_sensitivities,
                     load_scenarios, load_topology, make_scenario)
from .rules import RuleParams


def random_tree(rng, n):
    """Random tree on ``0..n`` rooted at 0 (each node attaches to an earlier one)."""
    return [(int(rng.integers(0, k)), k) for k in range(1, n + 1)]


def random_radial_feeder(rng, n, x_range=(0.005, 0.03), r_over_x=(1.0, 3.0), qhat=None):
    lines = []
    for a, b in random_tree(rng, n):
        x = rng.uniform(*x_range)
        lines.append((a, b, x * rng.uniform(*r_over_x), x))
    return build_radial_sensitivities(lines, 0, qhat=qhat)


def random_multiphase_X(rng, n, coupling=0.3):
    """Non-symmetric matrix with mixed-sign entries and positive-definite symmetric part."""
    while True:
        A = rng.uniform(0.2, 1.0, (n, n)) * 0.05
        base = A @ A.T + np.diag(rng.uniform(0.02, 0.1, n))
        noise = rng.normal(0.0, coupling, (n, n)) * base.max()
        np.fill_diagonal(noise, 0.0)
        X = base + noise
        if np.linalg.eigvalsh(0.5 * (X + X.T))[0] > 1e-6 and (n == 1 or np.any(X < 0)):
            return X


def random_multiphase_feeder(rng, n, qhat=None):
    X = random_multiphase_X(rng, n)
    phases = tuple("ABC"[k % 3] for k in range(n))
    return FeederModel(R=np.zeros_like(X), X=X, kind=MULTIPHASE, phases=phases, qhat=qhat)


def random_polytopic_alpha(rng, X, epsilon, mask=None, multiphase=False, fill=None):
    """Slopes satisfying the polytopic restriction, scaled to a random fraction of the limit."""
    W = np.abs(X) if multiphase else X
    n = W.shape[0]
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    a = rng.uniform(0.1, 1.0, n) * mask
    row_cap = (1.0 - epsilon) / W.sum(axis=1)
    a = np.minimum(a * row_cap, row_cap) * mask
    col = W.T @ a
    scale = (1.0 - epsilon) / col.max()
    a = a * min(1.0, scale)
    fill = rng.uniform(0.3, 1.0) if fill is None else fill
    return a * fill


def random_feasible_rule(rng, model, epsilon, mask=None, qhat=None):
    """Random IEEE-compliant rule whose slopes pass the polytopic test."""
    n = model.n_nodes
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    alpha = random_polytopic_alpha(rng, model.X, epsilon, mask, not model.is_single_phase)
    vref = rng.uniform(0.95, 1.05, n)
    delta = rng.uniform(0.0, 0.03, n)
    sigma = np.minimum(delta + rng.uniform(0.02, 0.15, n), 0.18)
    qbar = alpha * (sigma - delta)
    if qhat is None:
        qhat = qbar * rng.uniform(1.0, 1.5, n)
    qhat = np.where(mask, np.maximum(qhat, qbar), 0.0)
    return RuleParams(vref=vref, delta=delta, sigma=sigma, qbar=qbar, qhat=qhat, der_mask=mask)


def random_scenarios(rng, model, S, spread=0.05, center=1.0):
    vt = center + rng.uniform(-spread, spread, (S, model.n_nodes))
    from .feeder import Scenario

    return ScenarioSet(tuple(Scenario(vtilde=v) for v in vt), source="random")


def solar_scenarios(rng, model, S, load=(0.02, 0.06), solar=(0.0, 0.25), solar_nodes=None,
                    pf=(0.9, 1.0)):
    """Midday conditions: small loads with lagging power factor, heavy rooftop solar."""
    n = model.n_nodes
    nodes = np.arange(n) if solar_nodes is None else np.asarray(solar_nodes)
    out = []
    for _ in range(S):
        p_l = rng.uniform(*load, n)
        cosphi = rng.uniform(*pf, n)
        q_l = p_l * np.tan(np.arccos(cosphi))
        p_g = np.zeros(n)
        p_g[nodes] = rng.uniform(*solar, nodes.size)
        out.append(make_scenario(model, p_g, p_l, q_l))
    return ScenarioSet(tuple(out), source="synthetic-solar")


# -- bundled example data ----------------------------------------------------------

def _data_path(name):
    return resources.files("voltvar") / "data" / name


def bundled_feeder() -> FeederModel:
    """8-bus radial feeder with four DERs."""
    with resources.as_file(_data_path("feeder8.json")) as p:
        return load_topology(p)


def bundled_scenarios(model: FeederModel | None = None) -> ScenarioSet:
    """20 overvoltage scenarios for :func:`bundled_feeder`."""
    model = model or bundled_feeder()
    with resources.as_file(_data_path("scenarios20.csv")) as p:
        return load_scenarios(p, model)


def bundled_paths() -> dict:
    return {"feeder": str(_data_path("feeder8.json")),
            "scenarios": str(_data_path("scenarios20.csv"))}
