import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltvar.exceptions import InfeasibleError
from voltvar.projection import FeasibleSet
from voltvar.stability import polytopic_check_1p, polytopic_check_3p
from voltvar.synthetic import random_multiphase_X, random_radial_feeder

from oracles import grid_projection_1node


def _random_set(rng, multiphase=False):
    n = int(rng.integers(1, 7))
    X = random_multiphase_X(rng, n) if multiphase else random_radial_feeder(rng, n).X
    mask = rng.random(n) < 0.8
    mask[rng.integers(n)] = True
    qhat = rng.uniform(0.05, 0.5, n)
    eps = rng.uniform(0.1, 0.9)
    return FeasibleSet(X, qhat, mask, eps, multiphase=multiphase), X, mask, eps


def _random_point(rng, m):
    return (rng.uniform(0.9, 1.1, m), rng.uniform(0.05, 20, m), rng.uniform(-0.05, 0.08, m),
            rng.uniform(-0.05, 0.3, m))


def test_feasible_input_unchanged():
    fs = FeasibleSet([[0.5]], [1.0], [True], 0.5)
    r = fs.project([1.0], [2.0], [0.01], [0.05])
    assert (r.vref[0], r.c[0], r.delta[0], r.sigma[0]) == (1.0, 2.0, 0.01, 0.05)
    assert r.displacement == 0.0 and r.residual == 0.0


def test_vref_clipped_only():
    fs = FeasibleSet([[0.5]], [1.0], [True], 0.5)
    r = fs.project([1.10], [2.0], [0.01], [0.05])
    assert r.vref[0] == 1.05 and (r.c[0], r.delta[0], r.sigma[0]) == (2.0, 0.01, 0.05)
    assert r.displacement == pytest.approx(0.05)


def test_stability_row_grid_oracle():
    X, eps, qhat = 0.5, 0.5, 1.0
    fs = FeasibleSet([[X]], [qhat], [True], eps)
    for c0 in (0.2, 0.6, 0.95):
        r = fs.project([1.0], [c0], [0.01], [0.05])
        ref, step = grid_projection_1node(c0, X, qhat, eps, 0.04, n=20001)
        assert abs(r.c[0] - ref) <= max(1e-4, step)
        assert r.c[0] == pytest.approx(1.0, abs=1e-12)
        assert (r.delta[0], r.sigma[0]) == (0.01, 0.05)


def _zoom_grid(fs, x, gap_coords, levels=8, k=41, window=8):
    c0, d0, s0 = x
    top = max(4 * c0, 4 * fs.c_min[0], 0.5 / fs.qhat[0]) + 1
    lo = np.array([1e-3, 0.0, 0.02 if gap_coords else 0.0])
    hi = np.array([top, 0.03, 0.18])
    best, best_d = None, np.inf
    for _ in range(levels):
        axes = [np.linspace(lo[i], hi[i], k) for i in range(3)]
        C, D, T = (a.ravel() for a in np.meshgrid(*axes, indexing="ij"))
        S = D + T if gap_coords else T
        ok = ((D >= 0) & (D <= 0.03) & (S <= 0.18) & (S - D >= 0.02) & (S - D <= fs.qhat[0] * C)
              & (C >= fs.c_min[0]))
        ok &= np.all(fs.B[:, :1] / C[None, :] <= 1 - fs.epsilon, axis=0)
        dist = (C - c0) ** 2 + (D - d0) ** 2 + (S - s0) ** 2
        dist[~ok] = np.inf
        j = int(np.argmin(dist))
        if dist[j] < best_d:
            best, best_d = np.array([C[j], D[j], S[j]]), dist[j]
        width = (hi - lo) / (k - 1) * window
        centre = np.array([C[j], D[j], T[j]])
        lo, hi = centre - width, centre + width
    return best, best_d


def _zoom_grid_oracle(fs, x):
    """Brute-force projection for one DER: refine a grid around the best
    feasible point, once over (c, delta, sigma) and once over
    (c, delta, sigma - delta), and keep the closer answer."""
    a = _zoom_grid(fs, x, False)
    b = _zoom_grid(fs, x, True)
    return a[0] if a[1] <= b[1] else b[0]


@given(st.integers(0, 2**31))
def test_one_node_zoom_grid(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.05, 1.0)
    fs = FeasibleSet([[X]], [rng.uniform(0.05, 1.0)], [True], rng.uniform(0.1, 0.9))
    x = (rng.uniform(0.05, 5.0), rng.uniform(-0.03, 0.06), rng.uniform(-0.02, 0.25))
    r = fs.project([1.0], [x[0]], [x[1]], [x[2]])
    ref = _zoom_grid_oracle(fs, x)
    got = np.array([r.c[0], r.delta[0], r.sigma[0]])
    d_got = np.linalg.norm(got - x)
    d_ref = np.linalg.norm(ref - x)
    # the grid can only do worse than the exact projection
    assert d_got <= d_ref + 1e-9
    # local certificate: for a convex set a local minimizer is global
    pts = got + rng.normal(size=(200_000, 3)) * np.array([1e-3, 1e-4, 1e-4])
    C, D, S = pts.T
    ok = ((D >= 0) & (D <= 0.03) & (S <= 0.18) & (S - D >= 0.02) & (S - D <= fs.qhat[0] * C)
          & (C >= fs.c_min[0]) & np.all(fs.B[:, :1] / C[None, :] <= 1 - fs.epsilon, axis=0))
    closer = np.linalg.norm(pts[ok] - x, axis=1)
    assert closer.size == 0 or closer.min() >= d_got - 1e-12


@pytest.mark.parametrize("multiphase", [False, True])
def test_matches_conic_solver(multiphase):
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(7 + multiphase)
    for _ in range(15):
        fs, X, mask, eps = _random_set(rng, multiphase)
        m = fs.m
        v, c, d, s = _random_point(rng, m)
        r = fs.project(v, c, d, s)
        cc, dd, ss = cp.Variable(m), cp.Variable(m), cp.Variable(m)
        cons = [dd >= 0, dd <= 0.03, ss <= 0.18, dd + 0.02 <= ss,
                ss - dd <= cp.multiply(fs.qhat, cc), cc >= fs.c_min]
        if fs.B.size:
            cons.append(fs.B @ cp.inv_pos(cc) <= 1 - eps)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(cc - c) + cp.sum_squares(dd - d)
                                      + cp.sum_squares(ss - s)), cons)
        prob.solve(solver=cp.CLARABEL) if "CLARABEL" in cp.installed_solvers() else prob.solve()
        ref = np.concatenate([cc.value, dd.value, ss.value])
        got = np.concatenate([r.c, r.delta, r.sigma])
        x = np.concatenate([c, d, s])
        assert np.linalg.norm(got - x) <= np.linalg.norm(ref - x) + 1e-7
        np.testing.assert_allclose(got, ref, atol=1e-5 * max(1.0, np.abs(ref).max()))


@given(st.integers(0, 2**31), st.booleans())
def test_feasible_idempotent_and_stable(seed, multiphase):
    rng = np.random.default_rng(seed)
    fs, X, mask, eps = _random_set(rng, multiphase)
    r = fs.project(*_random_point(rng, fs.m))
    assert r.residual <= 1e-8
    again = fs.project(r.vref, r.c, r.delta, r.sigma)
    for k in ("vref", "c", "delta", "sigma"):
        np.testing.assert_allclose(getattr(again, k), getattr(r, k), atol=1e-9, rtol=0)
    alpha = np.zeros(len(mask))
    alpha[mask] = 1.0 / r.c
    check = polytopic_check_3p if multiphase else polytopic_check_1p
    assert check(X, alpha, eps, tol=1e-9)
    qbar = alpha[mask] * (r.sigma - r.delta)
    assert np.all(qbar <= fs.qhat * (1 + 1e-9))


@given(st.integers(0, 2**31))
def test_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    fs, *_ = _random_set(rng)
    x, y = _random_point(rng, fs.m), _random_point(rng, fs.m)
    px, py = fs.project(*x), fs.project(*y)
    a = np.concatenate([px.vref, px.c, px.delta, px.sigma])
    b = np.concatenate([py.vref, py.c, py.delta, py.sigma])
    assert np.linalg.norm(a - b) <= np.linalg.norm(np.concatenate(x) - np.concatenate(y)) + 1e-8


def test_zero_capability_is_infeasible():
    with pytest.raises(InfeasibleError) as exc:
        FeasibleSet([[0.5, 0.1], [0.1, 0.5]], [0.2, 0.0], [True, True], 0.5)
    assert exc.value.binding


def test_row_names_cover_constraints():
    fs = FeasibleSet([[0.5, 0.1], [0.1, 0.5]], [0.2, 0.2], [True, True], 0.5)
    y = np.concatenate([[3.0, 3.0], [0.01, 0.01], [0.05, 0.05]])
    assert len(fs.row_names()) == fs.constraints(y).size
