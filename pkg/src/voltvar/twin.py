"""Unrolled digital twin of the Volt/VAR dynamics.

Every layer applies one Volt/VAR building block per node and then the grid
model with a skip connection from the input::

    q^{t+1} = block(v^t),    v^{t+1} = X q^{t+1} + vtilde,    v^0 = vtilde

The block is a four-ReLU network: hidden weights fixed to ``[1, 1, -1, -1]``,
trainable hidden biases ``[-(vref+delta), -(vref+sigma), vref-delta, vref-sigma]``
and trainable output weights ``[-alpha, alpha, alpha, -alpha]``. All layers
share the same ``4N`` parameters ``z = (vref, alpha, delta, sigma)``.

Gradients are propagated by hand through the unrolled graph; the ReLU
derivative at exactly zero is taken as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .feeder import Scenario, ScenarioSet
from .rules import RuleParams

PARAM_NAMES = ("vref", "alpha", "delta", "sigma")


@dataclass(frozen=True)
class TwinConfig:
    """Depth policy.

    With ``adaptive_tol`` unset the twin always runs ``depth`` layers.
    Otherwise each scenario stops at the first layer where its objective
    ``1/2 ||v - 1||^2`` moves by less than ``adaptive_tol``, capped at
    ``max_depth`` (``10 * depth`` if not given).
    """

    depth: int = 50
    adaptive_tol: float | None = None
    max_depth: int | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("twin depth must be at least 1")
        if self.adaptive_tol is not None and self.adaptive_tol <= 0:
            raise ValidationError("adaptive_tol must be positive")

    @property
    def cap(self) -> int:
        if self.adaptive_tol is None:
            return self.depth
        return self.max_depth if self.max_depth is not None else 10 * self.depth


def pack(params: RuleParams) -> np.ndarray:
    """``(4, N)`` array of trainable parameters ``(vref, alpha, delta, sigma)``."""
    return np.array([params.vref, params.alpha, params.delta, params.sigma])


def unpack(z, qhat, der_mask=None) -> RuleParams:
    z = np.asarray(z, dtype=float)
    return RuleParams.from_components(
        "vref,alpha,delta,sigma", qhat, der_mask,
        vref=z[0], alpha=z[1], delta=z[2], sigma=z[3],
    )


def relu(x):
    return np.maximum(x, 0.0)


def _pre_activations(z, v):
    vref, _, delta, sigma = z
    return np.stack([v - (vref + delta), v - (vref + sigma), (vref - delta) - v, (vref - sigma) - v])


def block_forward(params_n, v):
    """Building block for one node: ``(vref, alpha, delta, sigma)`` and voltage ``v``."""
    z = np.asarray(params_n, dtype=float)
    h = relu(_pre_activations(z, np.asarray(v, dtype=float)))
    alpha = z[1]
    return alpha * (-h[0] + h[1] + h[2] - h[3])


def _block(z, v, mask):
    """Vectorised block over ``(S, N)`` voltages with node-wise parameters."""
    q = block_forward(z, v)
    return np.where(mask, q, 0.0)


@dataclass
class TwinOutput:
    v_out: np.ndarray          # (S, N)
    q_out: np.ndarray          # (S, N)
    layers_used: np.ndarray    # (S,)
    voltages: list             # v^0 .. v^Tmax, each (S, N)

    @property
    def depth(self) -> int:
        return len(self.voltages) - 1


def _as_z(params):
    if isinstance(params, RuleParams):
        return pack(params), params.der_mask
    z = np.asarray(params, dtype=float)
    return z, np.ones(z.shape[-1], bool)


def _as_vtilde(scenario):
    if isinstance(scenario, Scenario):
        return scenario.vtilde[None, :]
    if isinstance(scenario, ScenarioSet):
        return scenario.vtilde
    vt = np.asarray(scenario, dtype=float)
    return vt[None, :] if vt.ndim == 1 else vt


def _layer_z(z, t):
    return z[t] if z.ndim == 3 else z


def forward(model, config: TwinConfig, params, scenario, der_mask=None) -> TwinOutput:
    """Run the twin on one scenario or a batch.

    ``params`` is a :class:`RuleParams` or a ``(4, N)`` array; a ``(T, 4, N)``
    array gives every layer its own copy (used to check weight sharing).
    """
    z, mask = _as_z(params)
    if der_mask is not None:
        mask = np.asarray(der_mask, bool)
    vt = _as_vtilde(scenario)
    if vt.shape[-1] != model.n_nodes:
        raise ValidationError("scenario length does not match the feeder")
    X = model.X
    cap = config.cap if z.ndim == 2 else z.shape[0]
    S = vt.shape[0]
    v = vt.copy()
    voltages = [v]
    q = np.zeros_like(vt)
    used = np.full(S, cap)
    v_out = None
    if config.adaptive_tol is not None and z.ndim == 2:
        obj_prev = 0.5 * np.sum((v - 1.0) ** 2, axis=1)
        done = np.zeros(S, bool)
        v_out = np.empty_like(vt)
        q_out = np.zeros_like(vt)
    for t in range(cap):
        q = _block(_layer_z(z, t), v, mask)
        v = q @ X.T + vt
        voltages.append(v)
        if v_out is not None:
            obj = 0.5 * np.sum((v - 1.0) ** 2, axis=1)
            stop = ~done & (np.abs(obj - obj_prev) < config.adaptive_tol)
            if t == cap - 1:
                stop = ~done
            used[stop] = t + 1
            v_out[stop] = v[stop]
            q_out[stop] = q[stop]
            done |= stop
            obj_prev = obj
            if done.all():
                break
    if v_out is None:
        v_out, q_out = v, q
    return TwinOutput(v_out, q_out, used, voltages)


def loss(outputs) -> float:
    """``1/(2S) sum_s ||v_out_s - 1||^2`` over a :class:`TwinOutput` or a list of them."""
    if isinstance(outputs, TwinOutput):
        v = outputs.v_out
    else:
        outputs = list(outputs)
        if not outputs:
            raise ValidationError("loss needs at least one scenario")
        v = np.concatenate([o.v_out for o in outputs])
    if v.shape[0] == 0:
        raise ValidationError("loss needs at least one scenario")
    return float(0.5 * np.sum((v - 1.0) ** 2) / v.shape[0])


def _block_partials(z, v):
    """Derivatives of the block output w.r.t. ``v`` and each parameter."""
    _, alpha, _, _ = z
    u = _pre_activations(z, v)
    h = relu(u)
    g = (u > 0).astype(float)
    d_v = alpha * (-g[0] + g[1] - g[2] + g[3])
    d_vref = alpha * (g[0] - g[1] + g[2] - g[3])
    d_alpha = -h[0] + h[1] + h[2] - h[3]
    d_delta = alpha * (g[0] - g[2])
    d_sigma = alpha * (-g[1] + g[3])
    return d_v, np.stack([d_vref, d_alpha, d_delta, d_sigma])


def backward_layers(model, out: TwinOutput, params, der_mask=None) -> np.ndarray:
    """Per-layer gradients ``(T, 4, N)`` of the loss for a completed forward pass."""
    z, mask = _as_z(params)
    if der_mask is not None:
        mask = np.asarray(der_mask, bool)
    X = model.X
    T = out.depth
    S = out.v_out.shape[0]
    seed = (out.v_out - 1.0) / S
    grads = np.zeros((T, 4, model.n_nodes))
    g_v = np.zeros_like(out.v_out)
    for t in range(T, 0, -1):
        # scenarios whose realised depth ends here receive the loss seed
        g_v = g_v + np.where((out.layers_used == t)[:, None], seed, 0.0)
        g_q = g_v @ X
        d_v, d_p = _block_partials(_layer_z(z, t - 1), out.voltages[t - 1])
        g_q = np.where(mask, g_q, 0.0)
        grads[t - 1] = np.sum(d_p * g_q[None], axis=1)
        g_v = d_v * g_q
    return grads


def backward(model, config: TwinConfig, params, scenario_batch, der_mask=None):
    """Loss and its gradient w.r.t. the shared ``(vref, alpha, delta, sigma)``.

    Returns ``(loss, grad)`` with ``grad`` shaped ``(4, N)``, accumulated over
    all layers and averaged over the batch. DER-less nodes get zero gradient.
    """
    out = forward(model, config, params, scenario_batch, der_mask)
    grads = backward_layers(model, out, params, der_mask)
    return loss(out), grads.sum(axis=0)
