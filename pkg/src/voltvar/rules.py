"""IEEE 1547 Volt/VAR curves.

A curve is fixed by four numbers per DER: reference voltage ``vref``,
half-deadband ``delta``, saturation offset ``sigma`` and reactive limit
``qbar``. The slope of the affine segments is ``alpha = qbar / (sigma - delta)``
and its reciprocal ``c = 1 / alpha``. Any four of these that pin the curve
down are an equally valid parameterization.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DegenerateParameterization, ValidationError

# canonical storage is (vref, delta, sigma, qbar)
PARAMETERIZATIONS = (
    ("vref", "delta", "sigma", "qbar"),
    ("vref", "alpha", "delta", "qbar"),
    ("vref", "alpha", "delta", "sigma"),
    ("vref", "c", "delta", "sigma"),
    ("vref", "c", "delta", "qbar"),
)

VREF_MIN, VREF_MAX = 0.95, 1.05
DELTA_MAX = 0.03
GAP_MIN = 0.02
SIGMA_MAX = 0.18


def parse_parameterization(tag) -> tuple:
    """Accept ``"vref,alpha,delta,sigma"`` or a tuple; order-insensitive."""
    names = tuple(s.strip() for s in tag.split(",")) if isinstance(tag, str) else tuple(tag)
    for p in PARAMETERIZATIONS:
        if set(p) == set(names) and len(names) == 4:
            return p
    raise ValidationError(f"unknown parameterization {tag!r}")


def _arr(a, n=None):
    a = np.array(a, dtype=float).ravel()
    if n is not None and a.size == 1:
        a = np.full(n, a[0])
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RuleParams:
    """Per-node Volt/VAR curves.

    Nodes with ``der_mask`` False host no controllable DER; their setpoint is
    identically zero and their curve values are ignored everywhere.
    """

    vref: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    qbar: np.ndarray
    qhat: np.ndarray
    der_mask: np.ndarray = None
    parameterization: tuple = PARAMETERIZATIONS[0]
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = np.size(self.qhat)
        for name in ("vref", "delta", "sigma", "qbar", "qhat"):
            object.__setattr__(self, name, _arr(getattr(self, name), n))
        mask = np.ones(n, bool) if self.der_mask is None else np.array(self.der_mask, bool).ravel()
        mask.setflags(write=False)
        object.__setattr__(self, "der_mask", mask)
        object.__setattr__(self, "parameterization", parse_parameterization(self.parameterization))
        for name in ("vref", "delta", "sigma", "qbar", "der_mask"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have length {n}")

    @property
    def n_nodes(self) -> int:
        return self.qhat.size

    @property
    def alpha(self) -> np.ndarray:
        """Slope magnitude; zero on DER-less nodes."""
        gap = self.sigma - self.delta
        bad = self.der_mask & (gap <= 0)
        if np.any(bad):
            raise DegenerateParameterization(
                f"sigma <= delta at nodes {np.flatnonzero(bad).tolist()} (infinite slope)"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(self.der_mask, self.qbar / np.where(gap > 0, gap, 1.0), 0.0)
        return a

    @property
    def c(self) -> np.ndarray:
        a = self.alpha[self.der_mask]
        if np.any(a <= 0):
            raise DegenerateParameterization("zero slope has no finite reciprocal c")
        c = np.full(self.n_nodes, np.inf)
        c[self.der_mask] = 1.0 / a
        return c

    def components(self, target=None) -> dict:
        """Parameter arrays in ``target`` (default: this rule's own tag)."""
        names = parse_parameterization(target) if target is not None else self.parameterization
        out = {}
        for name in names:
            out[name] = np.array(getattr(self, name), dtype=float)
        return out

    @classmethod
    def from_components(cls, parameterization, qhat, der_mask=None, **values) -> "RuleParams":
        """Build from any supported parameterization, e.g. ``vref, alpha, delta, sigma``."""
        names = parse_parameterization(parameterization)
        if set(values) != set(names):
            raise ValidationError(f"expected components {names}, got {sorted(values)}")
        n = np.size(qhat)
        v = {k: _arr(x, n) for k, x in values.items()}
        if "c" in v:
            if np.any(v["c"] <= 0):
                raise DegenerateParameterization("c must be positive")
            v["alpha"] = 1.0 / v.pop("c")
        if "qbar" not in v:
            qbar = v["alpha"] * (v["sigma"] - v["delta"])
        else:
            qbar = v["qbar"]
        if "sigma" not in v:
            if np.any(v["alpha"] <= 0):
                raise DegenerateParameterization("cannot recover sigma from a zero slope")
            sigma = v["delta"] + qbar / v["alpha"]
        else:
            sigma = v["sigma"]
        return cls(vref=v["vref"], delta=v["delta"], sigma=sigma, qbar=qbar, qhat=qhat,
                   der_mask=der_mask, parameterization=names)


def default_rule(qhat, der_mask=None) -> RuleParams:
    """IEEE 1547 default curve ``(vref, delta, sigma, qbar) = (1, 0.02, 0.08, qhat)``."""
    qhat = np.asarray(qhat, dtype=float)
    n = qhat.size
    return RuleParams(vref=np.ones(n), delta=np.full(n, 0.02), sigma=np.full(n, 0.08),
                      qbar=qhat.copy(), qhat=qhat, der_mask=der_mask)


def convert(params: RuleParams, target) -> RuleParams:
    """Same curves, reported in another parameterization.

    Raises :class:`DegenerateParameterization` when the target needs a
    finite non-zero slope that the rule does not have.
    """
    names = parse_parameterization(target)
    if "alpha" in names or "c" in names:
        a = params.alpha[params.der_mask]
        if "c" in names and np.any(a <= 0):
            raise DegenerateParameterization("zero slope has no reciprocal c")
    return replace(params, parameterization=names)


def eval_rule(params: RuleParams, n: int, v: float) -> float:
    """Setpoint of DER ``n`` at local voltage ``v`` (scalar)."""
    if not params.der_mask[n]:
        return 0.0
    vref, d, s, qb = params.vref[n], params.delta[n], params.sigma[n], params.qbar[n]
    if s <= d:
        raise DegenerateParameterization(f"sigma <= delta at node {n}")
    a = qb / (s - d)
    u = v - vref
    if u > d:
        return float(max(-a * (u - d), -qb))
    if u < -d:
        return float(min(-a * (u + d), qb))
    return 0.0


def eval_rule_vector(params: RuleParams, v) -> np.ndarray:
    """Componentwise curve evaluation; ``v`` may be ``(N,)`` or ``(..., N)``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != params.n_nodes:
        raise ValidationError(f"voltage vector has {v.shape[-1]} entries, rule has {params.n_nodes}")
    a = params.alpha
    u = v - params.vref
    # dead-zone shrink then clip to the saturation level
    shrunk = np.sign(u) * np.maximum(np.abs(u) - params.delta, 0.0)
    q = np.clip(-a * shrunk, -params.qbar, params.qbar)
    return np.where(params.der_mask, q, 0.0)


@dataclass(frozen=True)
class Violation:
    node: int
    constraint: str
    margin: float

    def as_dict(self):
        return {"node": self.node, "constraint": self.constraint, "margin": self.margin}


def validate(params: RuleParams, tol: float = 1e-12) -> list:
    """Every violated IEEE 1547 bound, as a list of :class:`Violation`.

    An empty list is the compliance certificate. ``margin`` is the amount
    by which the bound is exceeded.
    """
    checks = [
        ("0.95 <= vref", VREF_MIN - params.vref),
        ("vref <= 1.05", params.vref - VREF_MAX),
        ("0 <= delta", -params.delta),
        ("delta <= 0.03", params.delta - DELTA_MAX),
        ("delta + 0.02 <= sigma", params.delta + GAP_MIN - params.sigma),
        ("sigma <= 0.18", params.sigma - SIGMA_MAX),
        ("0 <= qbar", -params.qbar),
        ("qbar <= qhat", params.qbar - params.qhat),
    ]
    out = []
    for n in np.flatnonzero(params.der_mask):
        for name, excess in checks:
            if excess[n] > tol:
                out.append(Violation(int(n), name, float(excess[n])))
    return out
