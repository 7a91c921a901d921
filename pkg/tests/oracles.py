"""Reference computations that share no code with the package."""
import itertools
import math

import numpy as np


def common_path_matrix(lines, root, which=3):
    """Dense brute force: walk each node's path to the root edge by edge and
    sum twice the impedance over the edges shared by two paths."""
    nodes = []
    for ln in lines:
        for node in ln[:2]:
            if node != root and node not in nodes:
                nodes.append(node)
    parent_edge = {}
    frontier = [root]
    seen = {root}
    while frontier:
        nxt = []
        for u in frontier:
            for k, ln in enumerate(lines):
                a, b = ln[0], ln[1]
                for p, c in ((a, b), (b, a)):
                    if p == u and c not in seen:
                        seen.add(c)
                        parent_edge[c] = (k, p)
                        nxt.append(c)
        frontier = nxt

    def path(n):
        edges = set()
        while n != root:
            k, p = parent_edge[n]
            edges.add(k)
            n = p
        return edges

    P = [path(n) for n in nodes]
    M = np.zeros((len(nodes), len(nodes)))
    for i, j in itertools.product(range(len(nodes)), repeat=2):
        M[i, j] = 2.0 * sum(lines[k][which] for k in P[i] & P[j])
    return M


def piecewise_rule(vref, delta, sigma, qbar, v):
    """Volt/VAR curve written region by region."""
    alpha = qbar / (sigma - delta)
    if v <= vref - sigma:
        return qbar
    if v < vref - delta:
        return alpha * ((vref - delta) - v)
    if v <= vref + delta:
        return 0.0
    if v < vref + sigma:
        return -alpha * (v - (vref + delta))
    return -qbar


def central_difference(f, z, h=1e-6):
    z = np.array(z, dtype=float)
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp = z.copy()
        zm = z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def grid_projection_1node(c0, X, qhat, eps, gap, c_hi=None, n=4001):
    """Closest feasible c on a fine (c, a) grid for a single DER with fixed
    delta/sigma gap: X a <= 1-eps, a c >= 1, c >= X/(1-eps), gap <= c qhat.
    ``a`` is free in the objective, so the distance is measured in c only."""
    c_hi = c_hi or max(4.0 * c0, 10.0)
    cs = np.linspace(1e-3, c_hi, n)
    a_max = (1.0 - eps) / X
    best, arg = math.inf, None
    for c in cs:
        if c < X / (1.0 - eps) or gap > c * qhat:
            continue
        # some a in [1/c, a_max] must exist
        if 1.0 / c > a_max:
            continue
        d = abs(c - c0)
        if d < best:
            best, arg = d, c
    return arg, cs[1] - cs[0]


def scalar_fixed_point(X, vt, vref, alpha):
    """Affine-region fixed point q = -alpha (X q + vt - vref) of one node, delta = 0."""
    return -alpha * (vt - vref) / (1.0 + alpha * X)
