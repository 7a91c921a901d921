"""Closed-loop Volt/VAR dynamics and their equilibrium.

Each step measures ``v^t = X q^t + vtilde`` and applies the curves,
``q^{t+1} = f(v^t)``. Under a stable rule the iteration contracts to the
unique equilibrium, which on single-phase feeders is also the minimizer of

    F(q) = 1/2 q'Xq + q'(vtilde - vref) + sum_n (q_n^2 / (2 alpha_n) + delta_n |q_n|)

over the box ``|q| <= qbar``. Both characterisations are implemented so each
can check the other.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError, KindError, ValidationError
from .feeder import FeederModel, Scenario
from .rules import RuleParams, eval_rule_vector
from .stability import loop_gain, min_depth

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
MAX_ITER_UNSTABLE = 100_000
STALL_STEPS = 50
STALL_FLOOR = 1e-11


def _vtilde(model, scenario):
    vt = scenario.vtilde if isinstance(scenario, Scenario) else np.asarray(scenario, float)
    if vt.shape[-1] != model.n_nodes:
        raise ValidationError(f"scenario has {vt.shape[-1]} nodes, feeder has {model.n_nodes}")
    return vt


def step(model: FeederModel, params: RuleParams, scenario, q):
    """One measurement/actuation round; returns ``(q_next, v)``."""
    vt = _vtilde(model, scenario)
    q = np.asarray(q, dtype=float)
    if q.shape != vt.shape:
        raise ValidationError("q and scenario differ in length")
    v = model.X @ q + vt
    return eval_rule_vector(params, v), v


@dataclass
class DynamicsTrace:
    setpoints: list
    voltages: list
    converged: bool
    settle_steps: int
    final_gap: float

    @property
    def q(self) -> np.ndarray:
        return np.array(self.setpoints)

    @property
    def v(self) -> np.ndarray:
        return np.array(self.voltages)


def simulate(model, params, scenario, T_max: int = 1000, tol: float = DEFAULT_TOL,
             q0=None) -> DynamicsTrace:
    """Iterate the dynamics from ``q0`` (zero by default).

    Stops once ``||q^{t+1} - q^t||_inf < tol``; otherwise runs ``T_max``
    steps and reports ``converged=False``. The trace holds ``q^0..q^T``
    and ``v^0..v^T`` with ``v^t = X q^t + vtilde``.
    """
    vt = _vtilde(model, scenario)
    q = np.zeros(model.n_nodes) if q0 is None else np.asarray(q0, float)
    qs, vs = [q], []
    gap = math.inf
    converged = False
    t = 0
    while t < T_max:
        q_next, v = step(model, params, vt, q)
        vs.append(v)
        gap_inf = float(np.max(np.abs(q_next - q))) if q.size else 0.0
        gap = float(np.linalg.norm(q_next - q))
        q = q_next
        qs.append(q)
        t += 1
        if gap_inf < tol:
            converged = True
            break
    vs.append(model.X @ q + vt)
    return DynamicsTrace(qs, vs, converged, t, gap)


@dataclass
class EquilibriumResult:
    q_star: np.ndarray
    v_star: np.ndarray
    method: str
    objective: float | None = None
    kkt_residual: float | None = None
    iterations: int = 0
    warnings: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "method": self.method,
            "q_star": self.q_star.tolist(),
            "v_star": self.v_star.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }


def iteration_budget(model, params, tol) -> tuple:
    """``(budget, warnings)`` for the fixed-point solver.

    Ten times the depth bound at the rule's own contraction margin; a
    fixed large cap when the rule is not certified stable.
    """
    gain = loop_gain(model.X, params.alpha)
    qh = params.qhat * params.der_mask
    if gain == 0.0 or not np.any(qh > 0):
        return 10, []
    if gain < 1.0:
        T = min_depth(model.X, qh, 1.0 - gain, max(tol, 1e-15) * 1e-3)
        return max(10 * T, 10), []
    return MAX_ITER_UNSTABLE, [f"rule is not contractive: ||diag(alpha) X||_2 = {gain:.4g}"]


def equilibrium_fixed_point(model, params, scenario, tol: float = 1e-12) -> EquilibriumResult:
    """Equilibrium by iterating the dynamics until the step falls below ``tol``."""
    vt = _vtilde(model, scenario)
    budget, warnings = iteration_budget(model, params, tol)
    for w in warnings:
        log.warning(w)
    q = np.zeros(model.n_nodes)
    best, since_best = math.inf, 0
    for it in range(1, budget + 1):
        q_next = eval_rule_vector(params, model.X @ q + vt)
        gap = np.max(np.abs(q_next - q), initial=0.0)
        q = q_next
        if gap <= tol:
            break
        if gap < best:
            best, since_best = gap, 0
        else:
            since_best += 1
        # a tolerance below the rounding floor leaves a tiny limit cycle
        if since_best >= STALL_STEPS and best <= STALL_FLOOR:
            warnings = warnings + [f"stalled at step size {best:.2e} (rounding floor), above tol={tol:g}"]
            break
    else:
        raise ConvergenceError(f"fixed-point iteration did not reach tol={tol:g} in {budget} steps")
    v = model.X @ q + vt
    obj = inner_objective(model, params, vt, q) if model.is_single_phase else None
    return EquilibriumResult(q, v, "fixed-point", obj, iterations=it, warnings=warnings)


def inner_objective(model, params, scenario, q) -> float:
    """``F(q) = V(q) + C(q)`` of the variational form (single-phase only).

    DER-less nodes are pinned at zero and contribute nothing.
    """
    if not model.is_single_phase:
        raise KindError("multiphase dynamics have no variational form")
    vt = _vtilde(model, scenario)
    q = np.asarray(q, dtype=float)
    m = params.der_mask
    if np.any(np.abs(q[~m]) > 0):
        raise ValidationError("q must vanish on nodes without DERs")
    if np.any(np.abs(q) > params.qbar + 1e-12):
        raise ValidationError("q lies outside the box |q| <= qbar")
    V = 0.5 * q @ model.X @ q + q @ (vt - params.vref)
    a = params.alpha[m]
    qm = q[m]
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = np.where(qm != 0, qm**2 / (2.0 * np.where(a > 0, a, 1.0)), 0.0)
    C = float(np.sum(quad + params.delta[m] * np.abs(qm)))
    return float(V + C)


def equilibrium_coordinate_descent(model, params, scenario, tol: float = 1e-12,
                                   max_sweeps: int = 100_000,
                                   record: bool = False) -> EquilibriumResult:
    """Equilibrium as the minimizer of ``F`` by exact cyclic coordinate minimization.

    Each coordinate problem is a scalar quadratic plus ``delta |q|`` on a
    box, solved in closed form by soft-thresholding and clipping. Nodes are
    swept in index order; DER-less nodes stay at zero. With ``record`` the
    objective after every sweep is kept in ``history``.
    """
    if not model.is_single_phase:
        raise KindError("coordinate descent needs the single-phase variational form")
    vt = _vtilde(model, scenario)
    X = model.X
    m = params.der_mask
    alpha = params.alpha
    c = np.zeros(model.n_nodes)
    active = m & (alpha > 0)
    c[active] = 1.0 / alpha[active]
    b = vt - params.vref
    q = np.zeros(model.n_nodes)
    grad = b.copy()  # X q + b, kept current
    idx = np.flatnonzero(active)
    history = []
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for n in idx:
            # partial residual excluding the diagonal term of coordinate n
            r = grad[n] - X[n, n] * q[n]
            st = math.copysign(max(abs(r) - params.delta[n], 0.0), -r)
            new = min(max(st / (X[n, n] + c[n]), -params.qbar[n]), params.qbar[n])
            d = new - q[n]
            if d != 0.0:
                grad += X[:, n] * d
                q[n] = new
                change = max(change, abs(d))
        if record:
            history.append(inner_objective(model, params, vt, q))
        if change < tol:
            break
    else:
        raise ConvergenceError(f"coordinate descent did not settle in {max_sweeps} sweeps")
    v = X @ q + vt
    return EquilibriumResult(q, v, "coordinate-descent", inner_objective(model, params, vt, q),
                             iterations=sweep, history=history)


def fixed_point_residual(model, params, scenario, q) -> float:
    """``||f(X q + vtilde) - q||_inf``."""
    vt = _vtilde(model, scenario)
    q = np.asarray(q, dtype=float)
    return float(np.max(np.abs(eval_rule_vector(params, model.X @ q + vt) - q), initial=0.0))


def curve_arrays(vref, alpha, delta, qbar, mask, v):
    """Volt/VAR curves with broadcastable parameter arrays (candidates x scenarios x nodes)."""
    u = v - vref
    shrunk = np.sign(u) * np.maximum(np.abs(u) - delta, 0.0)
    q = np.clip(-alpha * shrunk, -qbar, qbar)
    return np.where(mask, q, 0.0)


def equilibria_batch(X, vtilde, vref, alpha, delta, qbar, mask, tol: float = 1e-12,
                     max_iter: int = 10_000):
    """Fixed-point equilibria for many scenarios (and optionally many rules) at once.

    ``vtilde`` is ``(S, N)``; rule arrays broadcast against ``(..., S, N)``
    (use shape ``(K, 1, N)`` for ``K`` candidate rules). Returns
    ``(q, converged)`` where ``converged`` flags every scenario whose last
    step moved less than ``tol`` in the infinity norm. Each scenario is frozen
    once it converges, so its result does not depend on the rest of the batch.
    """
    X = np.asarray(X, dtype=float)
    shape = np.broadcast_shapes(np.shape(vtilde), np.shape(vref), np.shape(alpha))
    q = np.zeros(shape)
    converged = np.zeros(shape[:-1], bool)
    best = np.full(shape[:-1], np.inf)
    since = np.zeros(shape[:-1], int)
    for _ in range(max_iter):
        q_next = curve_arrays(vref, alpha, delta, qbar, mask, q @ X.T + vtilde)
        gap = np.max(np.abs(q_next - q), axis=-1, initial=0.0)
        q = np.where(converged[..., None], q, q_next)
        improved = gap < best
        best = np.where(improved, gap, best)
        since = np.where(improved, 0, since + 1)
        converged |= (gap <= tol) | ((since >= STALL_STEPS) & (best <= STALL_FLOOR))
        if converged.all():
            break
    return q, converged
