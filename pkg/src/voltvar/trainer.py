"""Optimal rule design by projected stochastic gradient descent on the twin.

One update: gradient step on ``(vref, alpha, delta, sigma)`` (plain or Adam),
switch to ``(vref, c, delta, sigma)`` with ``c = 1/alpha``, project onto the
convex design set, switch back.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dynamics import equilibria_batch, iteration_budget
from .exceptions import InfeasibleError, ValidationError
from .feeder import FeederModel, ScenarioSet
from .projection import FeasibleSet
from .rules import RuleParams, convert, validate
from .stability import StabilityCertificate, min_depth, polytopic_check, spectral_check
from .twin import TwinConfig, backward, forward, loss, pack, unpack

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-6
# (vref, delta, sigma, alpha) as used for the 37-bus tests; outside the
# IEEE box in delta and sigma, so it is projected before the first epoch
STANDARD_INIT = (0.95, 0.1, 0.3, 1.5)


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int | None = None
    epochs: int = 200
    epsilon: float = 0.5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    z_init: tuple = STANDARD_INIT
    depth: int | None = None
    depth_eps1: float = 1e-6
    adaptive_tol: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("step size must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError("epsilon must lie in (0, 1)")
        if self.optimizer not in ("plain", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")

    def as_dict(self):
        d = asdict(self)
        d["z_init"] = list(self.z_init) if not isinstance(self.z_init, RuleParams) else "rule file"
        return d


class Adam:
    """Bias-corrected adaptive moments on a fixed-shape parameter array."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_step(z, grad, lr, optimizer=None):
    """Intermediate point ``z - lr * direction``.

    With ``optimizer=None`` the direction is the raw gradient of the batch
    loss ``1/(2B) sum ||Phi - 1||^2``; an :class:`Adam` instance rescales it.
    """
    d = grad if optimizer is None else optimizer.direction(grad)
    return z - lr * d


def to_c_space(z, floor: float = ALPHA_FLOOR):
    """``(vref, alpha, delta, sigma) -> (vref, c, delta, sigma)``.

    Slopes below ``floor`` are clamped first; returns ``(x, n_clamped)``.
    """
    z = np.array(z, dtype=float)
    low = z[1] < floor
    z[1] = np.where(low, floor, z[1])
    z[1] = 1.0 / z[1]
    return z, int(low.sum())


def from_c_space(x):
    x = np.array(x, dtype=float)
    x[1] = 1.0 / x[1]
    return x


class Projector:
    """Projection on full ``(4, N)`` parameter arrays; DER-less columns pass through."""

    def __init__(self, model: FeederModel, qhat, der_mask, epsilon):
        self.mask = np.asarray(der_mask, bool)
        self.set = FeasibleSet.for_model(model, qhat, self.mask, epsilon)

    def __call__(self, x):
        """Project a ``(vref, c, delta, sigma)`` array; returns ``(z_tilde, result)``."""
        m = self.mask
        r = self.set.project(x[0][m], x[1][m], x[2][m], x[3][m])
        out = np.array(x, dtype=float)
        out[0][m], out[1][m], out[2][m], out[3][m] = r.vref, r.c, r.delta, r.sigma
        return out, r

    def residual(self, x) -> float:
        m = self.mask
        return self.set.residual(x[0][m], x[1][m], x[2][m], x[3][m])


def project(x, model, qhat, der_mask, epsilon):
    """Project a ``(4, N)`` point in ``(vref, c, delta, sigma)`` space."""
    return Projector(model, qhat, der_mask, epsilon)(x)[0]


@dataclass
class TrainReport:
    loss_per_epoch: list
    displacement_per_epoch: list
    residual_per_epoch: list
    final_params: RuleParams
    certificate: StabilityCertificate
    initial_params: RuleParams
    depth: int
    clamped_slopes: int = 0
    wall_clock: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def as_dict(self, include_timing: bool = False):
        from .io import rule_to_dict

        d = {
            "loss_per_epoch": self.loss_per_epoch,
            "displacement_per_epoch": self.displacement_per_epoch,
            "residual_per_epoch": self.residual_per_epoch,
            "final_params": rule_to_dict(self.final_params),
            "initial_params": rule_to_dict(self.initial_params),
            "certificate": self.certificate.as_dict(),
            "depth": self.depth,
            "clamped_slopes": self.clamped_slopes,
            "config": self.config,
        }
        if include_timing:
            d["wall_clock_per_epoch"] = self.wall_clock
        return d


def _initial_z(config, qhat, n):
    if isinstance(config.z_init, RuleParams):
        return pack(config.z_init)
    vref, delta, sigma, alpha = config.z_init
    return np.array([np.full(n, vref), np.full(n, alpha), np.full(n, delta), np.full(n, sigma)], float)


# parameters reported for nodes without a DER; they never act
_IDLE = (1.0, 0.0, 0.02, 0.08)


def _z_to_rule(z, qhat, mask):
    z = np.array(z, dtype=float)
    z[:, ~np.asarray(mask, bool)] = np.array(_IDLE)[:, None]
    return convert(unpack(z, qhat, mask), "vref,delta,sigma,qbar")


def train(model: FeederModel, scenarios, config: TrainConfig, qhat=None, der_mask=None,
          callback=None) -> TrainReport:
    """Design rules minimizing ``1/(2S) sum_s ||Phi(vtilde_s) - 1||^2``.

    ``qhat``/``der_mask`` default to the feeder's capabilities (a node with
    zero capability hosts no DER). ``callback(epoch, z)`` is invoked after
    every epoch with the projected ``(4, N)`` parameters.
    """
    vt = scenarios.vtilde if isinstance(scenarios, ScenarioSet) else np.atleast_2d(scenarios)
    S = vt.shape[0]
    if S == 0:
        raise ValidationError("training needs at least one scenario")
    if qhat is None:
        if isinstance(config.z_init, RuleParams):
            qhat, der_mask = config.z_init.qhat, config.z_init.der_mask
        elif model.qhat is not None:
            qhat = model.qhat
        else:
            raise ValidationError("inverter capabilities qhat are required")
    qhat = np.asarray(qhat, dtype=float)
    mask = (qhat > 0) if der_mask is None else np.asarray(der_mask, bool)
    n = model.n_nodes
    B = S if config.batch_size is None else min(config.batch_size, S)

    T = config.depth or max(1, min_depth(model.X, qhat * mask, config.epsilon, config.depth_eps1))
    twin_cfg = TwinConfig(depth=T, adaptive_tol=config.adaptive_tol)
    projector = Projector(model, qhat, mask, config.epsilon)

    x0, clamped = to_c_space(_initial_z(config, qhat, n))
    zt, _ = projector(x0)
    z = from_c_space(zt)
    initial = _z_to_rule(z, qhat, mask)

    rng = np.random.default_rng(config.seed)
    opt = Adam(z.shape, config.beta1, config.beta2, config.adam_eps) if config.optimizer == "adam" else None
    losses, disps, residuals, clock = [], [], [], []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(S)
        worst_disp = 0.0
        worst_res = 0.0
        for start in range(0, S, B):
            batch = vt[order[start:start + B]]
            _, grad = backward(model, twin_cfg, z, batch, mask)
            x_hat = sgd_step(z, grad, config.lr, opt)
            x_tilde, k = to_c_space(x_hat)
            clamped += k
            zt, res = projector(x_tilde)
            if res.residual > 1e-8:
                raise InfeasibleError(f"projection left residual {res.residual:.2e}",
                                      binding=projector.set.row_names())
            worst_disp = max(worst_disp, res.displacement)
            worst_res = max(worst_res, res.residual)
            z = from_c_space(zt)
        losses.append(loss(forward(model, twin_cfg, z, vt, mask)))
        disps.append(worst_disp)
        residuals.append(worst_res)
        clock.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, z)
        log.debug("epoch %d loss %.6e", epoch, losses[-1])

    final = _z_to_rule(z, qhat, mask)
    cert = spectral_check(model.X, final.alpha, config.epsilon, kind=model.kind)
    if clamped:
        log.info("slope clamped to %g on %d occasions", ALPHA_FLOOR, clamped)
    return TrainReport(losses, disps, residuals, final, cert, initial, T, clamped, clock,
                       config.as_dict())


@dataclass
class Evaluation:
    objective: float
    per_scenario: np.ndarray
    failed: list
    q_star: np.ndarray

    def __float__(self):
        return self.objective


def equilibria(model, params: RuleParams | None, vt, tol: float = 1e-12, threads: int = 1):
    """Equilibria ``(q, converged)`` for an ``(S, N)`` scenario array.

    With ``threads > 1`` contiguous scenario blocks are solved concurrently;
    results are reassembled in scenario order, so output does not depend
    on the thread count.
    """
    vt = np.atleast_2d(np.asarray(vt, dtype=float))
    if params is None:
        return np.zeros_like(vt), np.ones(vt.shape[0], bool)
    budget, _ = iteration_budget(model, params, tol)

    def solve(block):
        return equilibria_batch(model.X, block, params.vref, params.alpha, params.delta,
                                params.qbar, params.der_mask, tol=tol, max_iter=budget)

    threads = max(1, int(threads or 1))
    if threads == 1 or vt.shape[0] < 2:
        return solve(vt)
    from concurrent.futures import ThreadPoolExecutor

    blocks = np.array_split(vt, min(threads, vt.shape[0]))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(solve, blocks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def evaluate_detailed(model, params: RuleParams | None, scenarios, tol: float = 1e-12,
                      threads: int = 1) -> Evaluation:
    """Objective ``1/(2S) sum ||X q*_s + vtilde_s - 1||^2`` at converged equilibria.

    ``params=None`` means no reactive compensation (``q = 0``). Scenarios
    that fail to converge are excluded and listed in ``failed``.
    """
    vt = scenarios.vtilde if isinstance(scenarios, ScenarioSet) else np.atleast_2d(scenarios)
    q, ok = equilibria(model, params, vt, tol, threads)
    v = q @ model.X.T + vt
    per = 0.5 * np.sum((v - 1.0) ** 2, axis=1)
    failed = np.flatnonzero(~ok).tolist()
    if failed:
        log.warning("%d scenario(s) did not converge and were excluded", len(failed))
    obj = float(per[ok].sum() / max(ok.sum(), 1)) if ok.any() else math.nan
    return Evaluation(obj, per, failed, q)


def evaluate(model, params, scenarios, tol: float = 1e-12, threads: int = 1) -> float:
    return evaluate_detailed(model, params, scenarios, tol, threads).objective


def check_design(model, params: RuleParams, epsilon) -> dict:
    """Compliance and stability summary of a designed rule."""
    cert = spectral_check(model.X, params.alpha, epsilon, kind=model.kind)
    return {
        "violations": [v.as_dict() for v in validate(params, tol=1e-9)],
        "polytopic_pass": polytopic_check(model, params.alpha, epsilon, tol=1e-9),
        "certificate": cert.as_dict(),
    }
