"""Stability certificates for Volt/VAR slopes and the twin depth bound.

A rule is eps-stable when ``||diag(alpha) X||_2 <= 1 - eps``; the closed loop
is then a contraction with rate ``1 - eps``. The polytopic tests are linear
in ``alpha`` and imply the spectral one (via ``||A||_2^2 <= ||A||_1 ||A||_inf``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .exceptions import KindError, ValidationError

DENSE_SVD_MAX = 64


def _check_eps(epsilon):
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")


def spectral_norm(A, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Largest singular value of ``A``.

    Dense SVD up to 64 rows, power iteration on ``A'A`` beyond that.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0.0
    if A.shape[0] <= DENSE_SVD_MAX:
        return float(np.linalg.norm(A, 2))
    G = A.T @ A
    x = np.ones(G.shape[0]) / math.sqrt(G.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        y = G @ x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        if abs(nrm - lam) <= tol * max(nrm, 1.0):
            lam = nrm
            break
        lam = nrm
    return math.sqrt(lam)


@dataclass(frozen=True)
class StabilityCertificate:
    epsilon: float
    spectral_norm: float
    spectral_pass: bool
    polytopic_pass: bool
    kind: str

    def as_dict(self):
        return asdict(self)


def loop_gain(X, alpha) -> float:
    """``||diag(alpha) X||_2``."""
    alpha = np.asarray(alpha, dtype=float)
    return spectral_norm(alpha[:, None] * np.asarray(X, dtype=float))


def spectral_check(X, alpha, epsilon, kind: str = "single-phase") -> StabilityCertificate:
    """Certificate for ``||diag(alpha) X||_2 <= 1 - eps`` (equality passes)."""
    _check_eps(epsilon)
    X = np.asarray(X, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0):
        raise ValidationError("slopes must be non-negative")
    nrm = loop_gain(X, alpha)
    spectral_pass = nrm <= 1.0 - epsilon + 1e-12
    if kind == "single-phase" and np.all(X >= 0):
        poly = polytopic_check_1p(X, alpha, epsilon)
    else:
        poly = polytopic_check_3p(X, alpha, epsilon)
    return StabilityCertificate(float(epsilon), float(nrm), bool(spectral_pass), bool(poly), kind)


def _polytopic(W_col, W_row, alpha, epsilon, tol):
    # column test: W_col' alpha <= 1 - eps over every node
    if np.any(W_col.T @ alpha > 1.0 - epsilon + tol):
        return False
    # row test only where a DER is active; zero slopes add no loop gain
    active = alpha > 0
    bound = alpha[active] * W_row[active].sum(axis=1)
    return bool(np.all(bound <= 1.0 - epsilon + tol))


def polytopic_check_1p(X, alpha, epsilon, tol: float = 1e-12) -> bool:
    """Single-phase restriction: ``X alpha <= 1-eps`` and ``alpha_n sum_m X_nm <= 1-eps``."""
    _check_eps(epsilon)
    X = np.asarray(X, dtype=float)
    if np.any(X < 0) or not np.allclose(X, X.T, rtol=0, atol=1e-12):
        raise KindError("single-phase polytopic test needs a symmetric X with non-negative entries")
    alpha = np.asarray(alpha, dtype=float)
    return _polytopic(X.T, X, alpha, epsilon, tol)


def polytopic_check_3p(X, alpha, epsilon, tol: float = 1e-12) -> bool:
    """Multiphase restriction: ``|X|' alpha <= 1-eps`` and ``alpha_n sum_m |X_nm| <= 1-eps``."""
    _check_eps(epsilon)
    A = np.abs(np.asarray(X, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    return _polytopic(A, A, alpha, epsilon, tol)


def polytopic_check(model, alpha, epsilon, tol: float = 1e-12) -> bool:
    """Dispatch on the feeder kind."""
    if model.is_single_phase:
        return polytopic_check_1p(model.X, alpha, epsilon, tol)
    return polytopic_check_3p(model.X, alpha, epsilon, tol)


def certify(model, params, epsilon) -> StabilityCertificate:
    return spectral_check(model.X, params.alpha, epsilon, kind=model.kind)


def min_depth(X, qhat, epsilon, eps1) -> int:
    """Layers needed so the twin output is within ``eps1`` of equilibrium.

    ``T >= log(2 ||X||_2 ||qhat||_2 / eps1) / log(1 / (1 - eps))``, rounded
    up. ``X`` and ``qhat`` may be given directly as their 2-norms (scalars).
    """
    _check_eps(epsilon)
    if eps1 <= 0:
        raise ValidationError("eps1 must be positive")
    x_norm = float(X) if np.ndim(X) == 0 else spectral_norm(X)
    q_norm = float(qhat) if np.ndim(qhat) == 0 else float(np.linalg.norm(qhat))
    scale = 2.0 * x_norm * q_norm
    if scale <= eps1:
        return 0
    return int(math.ceil(math.log(scale / eps1) / -math.log1p(-epsilon)))
