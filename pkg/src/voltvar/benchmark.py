"""Independent checks on equilibria and designed rules.

* KKT residuals of the differentiable inner program
  ``min 1/2 q'(X + diag(c))q + q'(vtilde - vref) + delta'w  s.t. |q| <= w, |q| <= qbar``.
* Exact equilibria for tiny feeders by enumerating curve regions.
* Big-M encodings of complementary slackness.
* Exhaustive grid search over rule parameters, standing in for the
  mixed-integer bilevel formulation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EquilibriumResult, _vtilde, curve_arrays, equilibria_batch
from .exceptions import BoundaryAmbiguity, InfeasibleError, KindError, ValidationError
from .rules import (DELTA_MAX, GAP_MIN, SIGMA_MAX, VREF_MAX, VREF_MIN, RuleParams)

ENUM_MAX_NODES = 6
REGION_TOL = 1e-10


@dataclass
class KKTPoint:
    q: np.ndarray
    w: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    rows: dict = field(default_factory=dict)


def _slopes(params):
    alpha = params.alpha
    c = np.zeros_like(alpha)
    on = params.der_mask & (alpha > 0)
    c[on] = 1.0 / alpha[on]
    return c, on


def kkt_residual(model, params: RuleParams, scenario, q, tol: float = REGION_TOL):
    """Largest violation of the inner-program optimality conditions at ``q``.

    ``w = |q|`` and the multipliers are recovered in closed form from the
    region each coordinate lies in. Nodes without an active curve (no DER or
    zero reactive limit) are pinned at zero and excluded.

    Returns ``(residual, KKTPoint)``; ``point.rows`` has the per-row maxima.
    """
    if not model.is_single_phase:
        raise KindError("the KKT system describes single-phase equilibria only")
    vt = _vtilde(model, scenario)
    q = np.asarray(q, dtype=float)
    c, on = _slopes(params)
    delta, qbar = params.delta, params.qbar
    g = model.X @ q + c * q + vt - params.vref
    n = q.size
    w = np.abs(q)
    lam_lo, lam_hi, mu_lo, mu_hi = (np.zeros(n) for _ in range(4))
    scale = np.maximum(qbar, 1.0)
    for k in np.flatnonzero(on):
        at_hi = abs(q[k] - qbar[k]) <= tol * scale[k]
        at_lo = abs(q[k] + qbar[k]) <= tol * scale[k]
        if abs(q[k]) <= tol:
            # w = 0: lam_hi - lam_lo anywhere in [-delta, delta]
            d = float(np.clip(-g[k], -delta[k], delta[k]))
            lam_hi[k], lam_lo[k] = (delta[k] + d) / 2.0, (delta[k] - d) / 2.0
            rest = -g[k] - d
            if at_hi and rest > 0:
                mu_hi[k] = rest
            if at_lo and rest < 0:
                mu_lo[k] = -rest
        elif q[k] > 0:
            lam_hi[k] = delta[k]
            if at_hi:
                mu_hi[k] = max(-g[k] - delta[k], 0.0)
        else:
            lam_lo[k] = delta[k]
            if at_lo:
                mu_lo[k] = max(g[k] - delta[k], 0.0)
    stat = np.where(on, g - lam_lo + lam_hi - mu_lo + mu_hi, 0.0)
    rows = {
        "stationarity_q": float(np.max(np.abs(stat), initial=0.0)),
        "stationarity_w": float(np.max(np.abs(np.where(on, delta - lam_lo - lam_hi, 0.0)), initial=0.0)),
        "primal_w": float(np.max(np.abs(q) - w, initial=0.0)),
        "primal_qbar": float(max(np.max(np.abs(q) - qbar, initial=0.0), 0.0)),
        "pinned": float(np.max(np.abs(q[~on]), initial=0.0)),
        "dual": float(max(0.0, -min(lam_lo.min(initial=0), lam_hi.min(initial=0),
                                    mu_lo.min(initial=0), mu_hi.min(initial=0)))),
        "slack_lam_hi": float(np.max(np.abs(lam_hi * (q - w)), initial=0.0)),
        "slack_lam_lo": float(np.max(np.abs(lam_lo * (-q - w)), initial=0.0)),
        "slack_mu_hi": float(np.max(np.abs(mu_hi * (q - qbar)), initial=0.0)),
        "slack_mu_lo": float(np.max(np.abs(mu_lo * (-q - qbar)), initial=0.0)),
    }
    point = KKTPoint(q.copy(), w, lam_lo, lam_hi, mu_lo, mu_hi, rows)
    return max(rows.values()), point


# -- region enumeration --------------------------------------------------------

# region codes: node setpoint is
#   0 deadband (q = 0), 1 affine over-voltage, 2 saturated at -qbar,
#   3 affine under-voltage, 4 saturated at +qbar
REGIONS = (0, 1, 2, 3, 4)


def _region_bounds(params, k, region):
    """Voltage interval ``[lo, hi]`` consistent with ``region`` at node ``k``."""
    vr, d, s = params.vref[k], params.delta[k], params.sigma[k]
    return {
        0: (vr - d, vr + d),
        1: (vr + d, vr + s),
        2: (vr + s, math.inf),
        3: (vr - s, vr - d),
        4: (-math.inf, vr - s),
    }[region]


def enumerate_equilibrium(model, params: RuleParams, scenario, tol: float = REGION_TOL,
                          max_nodes: int = ENUM_MAX_NODES, return_all: bool = False):
    """Exact equilibrium by trying every region assignment of the active curves.

    Each assignment fixes every setpoint as an affine function of the
    voltages, so the equilibrium candidate solves one linear system; it is
    kept when the resulting voltages fall inside the assumed regions (up to
    ``tol``). Assignments that land on a shared boundary must agree on ``q``.
    """
    vt = _vtilde(model, scenario)
    c, on = _slopes(params)
    idx = np.flatnonzero(on)
    if idx.size > max_nodes:
        raise ValidationError(f"enumeration limited to {max_nodes} DER nodes, got {idx.size}")
    X = model.X
    n = model.n_nodes
    m = idx.size
    assigns = np.array(list(itertools.product(REGIONS, repeat=m)), dtype=int).reshape(-1, m)
    K = assigns.shape[0]
    # rows of A q = b; start from q = 0 on every node
    A = np.broadcast_to(np.eye(n), (K, n, n)).copy()
    b = np.zeros((K, n))
    vr, d, qb = params.vref, params.delta, params.qbar
    for j, k in enumerate(idx):
        r = assigns[:, j]
        aff = (r == 1) | (r == 3)
        # affine: c_k q_k + (X q)_k = vref_k +/- delta_k - vtilde_k
        A[aff, k, :] = X[k]
        A[aff, k, k] += c[k]
        b[r == 1, k] = vr[k] + d[k] - vt[k]
        b[r == 3, k] = vr[k] - d[k] - vt[k]
        b[r == 2, k] = -qb[k]
        b[r == 4, k] = qb[k]
    q = np.linalg.solve(A, b[..., None])[..., 0]
    v = q @ X.T + vt
    ok = np.ones(K, bool)
    for j, k in enumerate(idx):
        lo = np.array([_region_bounds(params, k, r)[0] for r in REGIONS])[assigns[:, j]]
        hi = np.array([_region_bounds(params, k, r)[1] for r in REGIONS])[assigns[:, j]]
        ok &= (v[:, k] >= lo - tol) & (v[:, k] <= hi + tol)
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        raise BoundaryAmbiguity("no region assignment is consistent with its own solution")
    q_hits = q[hits]
    spread = float(np.max(np.abs(q_hits - q_hits[0]), initial=0.0))
    if spread > 1e-9:
        raise BoundaryAmbiguity(
            f"{hits.size} consistent assignments disagree by {spread:.2e}; rule may be unstable"
        )
    q_star = q_hits[0]
    res = EquilibriumResult(q_star, X @ q_star + vt, "region-enumeration", iterations=int(K))
    if model.is_single_phase:
        res.kkt_residual = kkt_residual(model, params, vt, q_star)[0]
    if return_all:
        full = np.zeros((hits.size, n), int)
        full[:, idx] = assigns[hits]
        return res, full
    return res


# -- big-M ----------------------------------------------------------------------

@dataclass
class BigMSpec:
    M1: float
    M2: np.ndarray

    @classmethod
    def from_params(cls, params: RuleParams, M1: float):
        return cls(float(M1), 2.0 * np.asarray(params.qbar, dtype=float))


def calibrate_M1(model, params, scenarios) -> float:
    """Twice the largest multiplier seen at equilibrium over ``scenarios``, plus one."""
    from .dynamics import equilibrium_fixed_point

    biggest = 0.0
    for s in scenarios:
        q = equilibrium_fixed_point(model, params, s).q_star
        _, pt = kkt_residual(model, params, s, q)
        biggest = max(biggest, *(float(np.max(a, initial=0.0)) for a in
                                 (pt.lam_lo, pt.lam_hi, pt.mu_lo, pt.mu_hi)))
    return 2.0 * biggest + 1.0


def _pair_binary(dual, slack, M1, M2, tol):
    """Binary making ``0 <= dual <= M1 b`` and ``0 <= slack <= M2 (1 - b)`` hold, or None."""
    if dual < -tol or slack < -tol:
        return None
    if slack <= tol and dual <= M1 + tol:
        return 1
    if dual <= tol and slack <= M2 + tol:
        return 0
    return None


def check_cq_bounds(params: RuleParams, tol: float = 1e-12) -> bool:
    """Saturation-gap constraint in ``(c, qbar)``: ``0.02 <= c*qbar <= 0.18 - delta``."""
    c, on = _slopes(params)
    cq = c[on] * params.qbar[on]
    return bool(np.all(cq >= GAP_MIN - tol) and np.all(cq <= SIGMA_MAX - params.delta[on] + tol))


def check_bigM(model, params: RuleParams, scenario, point: KKTPoint, spec: BigMSpec,
               tol: float = 1e-9):
    """Look for binaries that satisfy all four big-M complementarity encodings.

    Slacks are taken as the non-negative quantities ``w - q``, ``w + q``,
    ``qbar - q`` and ``qbar + q``. Returns ``(passed, witness)`` where the
    witness maps each pair to its binary vector (None where no binary
    works); ``passed`` also requires the ``c*qbar`` bounds.
    """
    _, on = _slopes(params)
    M2 = np.broadcast_to(np.asarray(spec.M2, dtype=float), point.q.shape)
    pairs = {
        "lam_hi": (point.lam_hi, point.w - point.q),
        "lam_lo": (point.lam_lo, point.w + point.q),
        "mu_hi": (point.mu_hi, params.qbar - point.q),
        "mu_lo": (point.mu_lo, params.qbar + point.q),
    }
    witness = {}
    ok = True
    for name, (dual, slack) in pairs.items():
        bits = []
        for k in range(point.q.size):
            if not on[k]:
                bits.append(0)
                continue
            b = _pair_binary(dual[k], slack[k], spec.M1, M2[k], tol)
            ok &= b is not None
            bits.append(b)
        witness[name] = bits
    return bool(ok and check_cq_bounds(params)), witness


# -- grid search -----------------------------------------------------------------

@dataclass
class GridSpec:
    vref: tuple = tuple(np.linspace(VREF_MIN, VREF_MAX, 6))
    delta: tuple = (0.0, 0.015, 0.03)
    sigma: tuple = tuple(np.linspace(0.02, SIGMA_MAX, 5))
    alpha: tuple = tuple(np.linspace(0.5, 5.0, 6))
    max_candidates: int = 1_000_000


@dataclass
class GridResult:
    params: RuleParams
    objective: float
    candidates: np.ndarray   # (K, n_der, 4) rows of (vref, delta, sigma, alpha)
    objectives: np.ndarray
    best_index: int


def _local_candidates(grid: GridSpec, qhat_n: float):
    out = []
    for vr, d, s, a in itertools.product(grid.vref, grid.delta, grid.sigma, grid.alpha):
        if s < d + GAP_MIN - 1e-12 or d > DELTA_MAX + 1e-12 or s > SIGMA_MAX + 1e-12:
            continue
        if not VREF_MIN - 1e-12 <= vr <= VREF_MAX + 1e-12:
            continue
        if a * (s - d) > qhat_n + 1e-12:
            continue
        out.append((vr, d, s, a))
    return np.array(out, dtype=float).reshape(-1, 4)


def grid_search_ord(model, scenarios, epsilon, grid: GridSpec | None = None, qhat=None,
                    der_mask=None, chunk: int = 4096, tol: float = 1e-12) -> GridResult:
    """Best rule on a Cartesian grid of ``(vref, delta, sigma, alpha)`` per DER.

    Only candidates meeting the IEEE 1547 box and the polytopic stability
    restriction are evaluated. Ties go to the lowest candidate index.
    """
    from .stability import polytopic_check
    from .trainer import evaluate

    grid = grid or GridSpec()
    qhat = np.asarray(model.qhat if qhat is None else qhat, dtype=float)
    mask = (qhat > 0) if der_mask is None else np.asarray(der_mask, bool)
    idx = np.flatnonzero(mask)
    if idx.size > 2:
        raise ValidationError("grid search is limited to two DERs")
    vt = scenarios.vtilde if hasattr(scenarios, "vtilde") else np.atleast_2d(scenarios)
    local = [_local_candidates(grid, qhat[k]) for k in idx]
    if any(len(l) == 0 for l in local):
        raise InfeasibleError("no grid point satisfies the IEEE 1547 box",
                              binding=["delta + 0.02 <= sigma", "qbar <= qhat"])
    total = math.prod(len(l) for l in local)
    if total > grid.max_candidates:
        raise ValidationError(f"grid has {total} candidates, limit is {grid.max_candidates}")
    combos = np.array(list(itertools.product(*[range(len(l)) for l in local])), int)
    cand = np.stack([local[j][combos[:, j]] for j in range(idx.size)], axis=1)  # (K, m, 4)
    n = model.n_nodes
    alpha_full = np.zeros((cand.shape[0], n))
    alpha_full[:, idx] = cand[:, :, 3]
    stable = np.array([polytopic_check(model, a, epsilon) for a in alpha_full])
    if not stable.any():
        raise InfeasibleError("no grid point satisfies the stability restriction",
                              binding=["X alpha <= 1-eps", "alpha_n sum_m X_nm <= 1-eps"])
    cand = cand[stable]
    K = cand.shape[0]

    def full(col, fill):
        a = np.full((K, n), fill, dtype=float)
        a[:, idx] = cand[:, :, col]
        return a

    vref, delta, sigma, alpha = full(0, 1.0), full(1, 0.0), full(2, 0.1), full(3, 0.0)
    qbar = alpha * (sigma - delta)
    objs = np.empty(K)
    for lo in range(0, K, chunk):
        sl = slice(lo, lo + chunk)
        q, ok = equilibria_batch(model.X, vt, vref[sl, None], alpha[sl, None], delta[sl, None],
                                 qbar[sl, None], mask, tol=tol, max_iter=20_000)
        v = q @ model.X.T + vt
        o = 0.5 * np.sum((v - 1.0) ** 2, axis=(1, 2)) / vt.shape[0]
        o[~ok.all(axis=1)] = np.inf
        objs[sl] = o
    best = int(np.argmin(objs))
    params = RuleParams(vref=vref[best], delta=delta[best], sigma=sigma[best], qbar=qbar[best],
                        qhat=qhat, der_mask=mask)
    return GridResult(params, float(objs[best]), cand, objs, best)


# -- MINLP listing ----------------------------------------------------------------

def export_minlp(model, scenarios, epsilon, M1: float, path=None, qhat=None, der_mask=None) -> str:
    """Plain-text algebraic listing of the single-level mixed-integer formulation.

    One declaration or constraint per line, symbolic names only; meant for
    transcription into an external modelling tool.
    """
    qhat = np.asarray(model.qhat if qhat is None else qhat, dtype=float)
    mask = (qhat > 0) if der_mask is None else np.asarray(der_mask, bool)
    vt = scenarios.vtilde if hasattr(scenarios, "vtilde") else np.atleast_2d(scenarios)
    S, n = vt.shape
    X = model.X
    W = X if model.is_single_phase else np.abs(X)
    G = np.flatnonzero(mask)
    L = []
    L.append(f"# nodes={n} ders={G.size} scenarios={S} epsilon={epsilon} M1={M1}")
    L.append("minimize (1/(2*%d)) * sum_{s,k} (sum_m X[k,m]*q[s,m] + vt[s,k] - 1)^2" % S)
    for k in range(n):
        L.append("param X[%d,:] = [%s]" % (k, ", ".join(f"{x:.12g}" for x in X[k])))
    for s in range(S):
        L.append("param vt[%d,:] = [%s]" % (s, ", ".join(f"{x:.12g}" for x in vt[s])))
    for n_ in G:
        L.append(f"var vref[{n_}] in [{VREF_MIN}, {VREF_MAX}]")
        L.append(f"var delta[{n_}] in [0, {DELTA_MAX}]")
        L.append(f"var qbar[{n_}] in [0, {qhat[n_]:.12g}]")
        L.append(f"var c[{n_}] >= {W[n_].sum() / (1 - epsilon):.12g}")
        L.append(f"var a[{n_}] >= 0")
        L.append(f"bilinear: {GAP_MIN} <= c[{n_}]*qbar[{n_}] <= {SIGMA_MAX} - delta[{n_}]")
        L.append(f"conic: a[{n_}]*c[{n_}] >= 1")
    for k in range(n):
        terms = " + ".join(f"{W[n_, k]:.12g}*a[{n_}]" for n_ in G)
        if terms:
            L.append(f"stability[{k}]: {terms} <= {1 - epsilon:.12g}")
    for s in range(S):
        for n_ in G:
            xq = " + ".join(f"{X[n_, m]:.12g}*q[{s},{m}]" for m in G)
            pre = f"[{s},{n_}]"
            L.append(f"var q{pre} free; var w{pre} >= 0")
            L.append(f"var lam_lo{pre}, lam_hi{pre}, mu_lo{pre}, mu_hi{pre} >= 0")
            L.append(f"binary b_lam_lo{pre}, b_lam_hi{pre}, b_mu_lo{pre}, b_mu_hi{pre}")
            L.append(f"kkt_q{pre}: {xq} + c[{n_}]*q{pre} + {vt[s, n_]:.12g} - vref[{n_}]"
                     f" - lam_lo{pre} + lam_hi{pre} - mu_lo{pre} + mu_hi{pre} = 0")
            L.append(f"kkt_w{pre}: delta[{n_}] - lam_lo{pre} - lam_hi{pre} = 0")
            L.append(f"primal{pre}: -w{pre} <= q{pre} <= w{pre}; -qbar[{n_}] <= q{pre} <= qbar[{n_}]")
            for dual, slack in (("lam_hi", f"w{pre} - q{pre}"), ("lam_lo", f"w{pre} + q{pre}"),
                                ("mu_hi", f"qbar[{n_}] - q{pre}"), ("mu_lo", f"qbar[{n_}] + q{pre}")):
                L.append(f"bigM_{dual}{pre}: 0 <= {dual}{pre} <= {M1:.12g}*b_{dual}{pre}; "
                         f"0 <= {slack} <= 2*qbar[{n_}]*(1 - b_{dual}{pre})")
    text = "\n".join(L) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
