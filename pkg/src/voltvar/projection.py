"""Euclidean projection onto IEEE 1547 + stability constraints in ``(vref, c, delta, sigma)``.

In the reciprocal-slope space ``c = 1/alpha`` the design constraints become
convex. Per DER node ``n``::

    0.95 <= vref_n <= 1.05
    0 <= delta_n <= 0.03,   delta_n + 0.02 <= sigma_n <= 0.18
    sigma_n - delta_n <= qhat_n c_n                        (qbar <= qhat)
    c_n >= sum_m W_nm / (1 - eps)                          (row bound on alpha)

and jointly ``B a <= (1 - eps)`` with ``a_n c_n >= 1``. ``W`` is ``X`` on
single-phase feeders and ``|X|`` on multiphase ones; ``B`` holds the columns
of ``W'`` belonging to DER nodes. Because ``B >= 0`` the auxiliary ``a``
can always be taken as ``1/c``, which leaves the smooth convex constraint
``B (1/c) <= 1 - eps``.

``vref`` is decoupled and clipped. The rest is solved by a primal-dual
interior-point method followed by an active-set Newton polish.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleError, ValidationError
from .rules import DELTA_MAX, GAP_MIN, SIGMA_MAX, VREF_MAX, VREF_MIN

ROW_NAMES = (
    "0 <= delta",
    "delta <= 0.03",
    "sigma <= 0.18",
    "delta + 0.02 <= sigma",
    "sigma - delta <= c*qhat",
    "c >= W1/(1-eps)",
)
COUPLING_NAME = "W'(1/c) <= 1-eps"


@dataclass
class ProjectionResult:
    vref: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    displacement: float
    residual: float
    iterations: int
    polished: bool


class FeasibleSet:
    """Convex design set for one feeder, DER placement and stability margin.

    All arrays passed to and returned from the methods are restricted to DER
    nodes (length ``m = der_mask.sum()``).
    """

    def __init__(self, X, qhat, der_mask, epsilon, multiphase=False):
        if not 0.0 < epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
        X = np.asarray(X, dtype=float)
        mask = np.asarray(der_mask, bool)
        W = np.abs(X) if multiphase else X
        self.epsilon = float(epsilon)
        self.mask = mask
        self.qhat = np.asarray(qhat, dtype=float)[mask]
        self.m = int(mask.sum())
        self.c_min = W[mask].sum(axis=1) / (1.0 - epsilon)
        B = W[mask].T                      # (N, m): row k is sum over DER n of W_nk / c_n
        keep = np.any(B > 0, axis=1)
        self.B = B[keep]
        if np.any(self.qhat <= 0):
            bad = np.flatnonzero(self.qhat <= 0).tolist()
            raise InfeasibleError(
                f"DER nodes {bad} (DER-local index) have zero capability; "
                "the saturation gap cannot reach 0.02",
                binding=[ROW_NAMES[3], ROW_NAMES[4]],
            )

    @classmethod
    def for_model(cls, model, qhat, der_mask, epsilon):
        return cls(model.X, qhat, der_mask, epsilon, multiphase=not model.is_single_phase)

    # constraint bookkeeping --------------------------------------------------
    def _split(self, y):
        m = self.m
        return y[:m], y[m:2 * m], y[2 * m:]

    def constraints(self, y) -> np.ndarray:
        c, d, s = self._split(y)
        with np.errstate(divide="ignore"):
            inv = 1.0 / c
        lin = np.concatenate([
            -d,
            d - DELTA_MAX,
            s - SIGMA_MAX,
            d + GAP_MIN - s,
            s - d - self.qhat * c,
            self.c_min - c,
        ])
        return np.concatenate([lin, self.B @ inv - (1.0 - self.epsilon)])

    def _jacobian(self, y) -> np.ndarray:
        m = self.m
        c = y[:m]
        I = np.eye(m)
        Z = np.zeros((m, m))
        rows = [
            np.hstack([Z, -I, Z]),
            np.hstack([Z, I, Z]),
            np.hstack([Z, Z, I]),
            np.hstack([Z, I, -I]),
            np.hstack([-np.diag(self.qhat), -I, I]),
            np.hstack([-I, Z, Z]),
            np.hstack([-self.B / c**2, np.zeros((self.B.shape[0], 2 * m))]),
        ]
        return np.vstack(rows)

    def _lagrangian_hessian(self, y, lam) -> np.ndarray:
        m = self.m
        c = y[:m]
        H = np.eye(3 * m)
        lam_nl = lam[6 * m:]
        H[np.arange(m), np.arange(m)] += 2.0 * (lam_nl @ self.B) / c**3
        return H

    def row_names(self) -> list:
        names = [f"{ROW_NAMES[k]} [der {i}]" for k in range(6) for i in range(self.m)]
        return names + [f"{COUPLING_NAME} [row {k}]" for k in range(self.B.shape[0])]

    def residual(self, vref, c, delta, sigma) -> float:
        """Largest constraint violation (0 when feasible)."""
        vref = np.asarray(vref, float)
        y = np.concatenate([np.asarray(c, float), np.asarray(delta, float), np.asarray(sigma, float)])
        g = self.constraints(y)
        box = np.concatenate([VREF_MIN - vref, vref - VREF_MAX])
        return float(max(0.0, np.max(g, initial=-np.inf), np.max(box, initial=-np.inf)))

    # solver ------------------------------------------------------------------
    def _interior_start(self):
        m = self.m
        colsum = self.B.sum(axis=1).max(initial=0.0)
        C = max(2.0 * colsum / (1.0 - self.epsilon), 1e-3)
        c0 = np.maximum.reduce([np.full(m, C), 2.0 * self.c_min, 0.2 / self.qhat])
        return np.concatenate([c0, np.full(m, 0.015), np.full(m, 0.1)])

    def _ipm(self, x, tol=1e-13, max_iter=200):
        y = self._interior_start()
        g = self.constraints(y)
        M = g.size
        lam = np.ones(M) / np.maximum(-g, 1e-12) * 1e-2
        mu_factor = 10.0
        it = 0
        for it in range(1, max_iter + 1):
            g = self.constraints(y)
            J = self._jacobian(y)
            eta = -g @ lam
            t = mu_factor * M / eta
            r_d = (y - x) + J.T @ lam
            r_c = -lam * g - 1.0 / t
            if np.linalg.norm(r_d) <= tol * max(1.0, np.linalg.norm(x)) and eta <= tol:
                break
            H = self._lagrangian_hessian(y, lam) - J.T @ ((lam / g)[:, None] * J)
            rhs = -r_d - J.T @ (r_c / g)
            dy = np.linalg.solve(H, rhs)
            dlam = (r_c - lam * (J @ dy)) / g
            neg = dlam < 0
            s = min(1.0, float(np.min(-lam[neg] / dlam[neg]))) if np.any(neg) else 1.0
            s *= 0.99
            while np.any(self.constraints(y + s * dy) >= 0):
                s *= 0.5
                if s < 1e-16:
                    break
            norm0 = np.linalg.norm(np.concatenate([r_d, r_c]))
            while s > 1e-16:
                y1, lam1 = y + s * dy, lam + s * dlam
                g1 = self.constraints(y1)
                r1 = np.concatenate([(y1 - x) + self._jacobian(y1).T @ lam1, -lam1 * g1 - 1.0 / t])
                if np.linalg.norm(r1) <= (1.0 - 0.01 * s) * norm0:
                    break
                s *= 0.5
            y, lam = y + s * dy, lam + s * dlam
            if s <= 1e-16:
                break
        return y, lam, it

    def _polish(self, x, y, lam):
        """Newton on the equality system of the identified active set."""
        g = self.constraints(y)
        active = np.flatnonzero(lam > -g)
        if active.size == 0:
            return None
        z = y.copy()
        mult = lam[active].copy()
        for _ in range(30):
            J = self._jacobian(z)[active]
            gA = self.constraints(z)[active]
            full = np.zeros_like(lam)
            full[active] = mult
            H = self._lagrangian_hessian(z, full)
            K = np.block([[H, J.T], [J, np.zeros((active.size, active.size))]])
            rhs = -np.concatenate([(z - x) + J.T @ mult, gA])
            # lstsq tolerates duplicated active rows (e.g. c_min coinciding with the coupling row)
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if not np.all(np.isfinite(sol)):
                return None
            z = z + sol[:z.size]
            mult = mult + sol[z.size:]
            if np.linalg.norm(sol) <= 1e-15 * max(1.0, np.linalg.norm(z)):
                break
        if np.any(mult < -1e-10) or np.any(z[:self.m] <= 0):
            return None
        if np.max(self.constraints(z)) > 1e-12:
            return None
        return z

    def _snap(self, y, tol=1e-12):
        # round-off around the box bounds is moved onto the bound itself
        y = y.copy()
        m = self.m
        d, s = y[m:2 * m], y[2 * m:]
        for arr, lo, hi in ((d, 0.0, DELTA_MAX), (s, None, SIGMA_MAX)):
            if lo is not None:
                arr[np.abs(arr - lo) <= tol] = lo
            arr[np.abs(arr - hi) <= tol] = hi
        return y

    def project(self, vref, c, delta, sigma) -> ProjectionResult:
        """Closest feasible point to ``(vref, c, delta, sigma)``."""
        vref = np.asarray(vref, float)
        c = np.asarray(c, float)
        delta = np.asarray(delta, float)
        sigma = np.asarray(sigma, float)
        x = np.concatenate([c, delta, sigma])
        v_out = np.clip(vref, VREF_MIN, VREF_MAX)
        if self.m == 0:
            return ProjectionResult(v_out, c, delta, sigma, np.array([]), 0.0, 0.0, 0, False)
        g = self.constraints(x) if np.all(c > 0) else np.array([np.inf])
        if np.max(g) <= 1e-13:
            y, it, polished = x, 0, False
        else:
            y, lam, it = self._ipm(x)
            z = self._polish(x, y, lam)
            polished = z is not None and np.linalg.norm(z - x) <= np.linalg.norm(y - x) + 1e-12
            if polished:
                y = z
            y = self._snap(y)
        cc, dd, ss = self._split(y)
        disp = float(np.sqrt(np.sum((y - x) ** 2) + np.sum((v_out - vref) ** 2)))
        res = self.residual(v_out, cc, dd, ss)
        return ProjectionResult(v_out, cc.copy(), dd.copy(), ss.copy(), 1.0 / cc, disp, res, it, polished)
