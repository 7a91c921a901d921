"""Linearized feeder model, sensitivity matrices and grid-condition scenarios.

Voltages obey ``v = R p + X q + v0`` (all per-unit). Once the uncontrolled
injections are folded into a grid-condition vector ``vtilde``, the only
controlled term left is ``v = X q + vtilde``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ModelRejected, ParseError, TopologyError, ValidationError

SINGLE_PHASE = "single-phase"
MULTIPHASE = "multiphase"
PD_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeederModel:
    """Sensitivity matrices of a feeder with the substation removed.

    Nodes are indexed ``0..N-1`` internally; ``nodes`` keeps the external
    labels so that node ``k`` here is the label ``nodes[k]`` in input files.
    """

    R: np.ndarray
    X: np.ndarray
    v0: float = 1.0
    kind: str = SINGLE_PHASE
    phases: tuple = ()
    nodes: tuple = ()
    qhat: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        R = _frozen(self.R)
        X = _frozen(self.X)
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ValidationError(f"X must be square, got shape {X.shape}")
        if R.shape != X.shape:
            raise ValidationError(f"R {R.shape} and X {X.shape} differ in shape")
        if self.kind not in (SINGLE_PHASE, MULTIPHASE):
            raise ValidationError(f"unknown feeder kind {self.kind!r}")
        n = X.shape[0]
        phases = tuple(self.phases) or ("single",) * n
        nodes = tuple(self.nodes) or tuple(range(1, n + 1))
        if len(phases) != n or len(nodes) != n:
            raise ValidationError("phase/node labels must have one entry per node")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "v0", float(self.v0))
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "nodes", nodes)
        if self.qhat is not None:
            qhat = _frozen(self.qhat)
            if qhat.shape != (n,) or np.any(qhat < 0):
                raise ValidationError("qhat must be a non-negative N-vector")
            object.__setattr__(self, "qhat", qhat)
        check_model(self)

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def is_single_phase(self) -> bool:
        return self.kind == SINGLE_PHASE


def min_symmetric_eig(X) -> float:
    """Smallest eigenvalue of the symmetric part of ``X``.

    Positive means ``z' X z > 0`` for every non-zero ``z``.
    """
    X = np.asarray(X, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (X + X.T))[0])


def check_model(model: FeederModel) -> None:
    """Raise :class:`ModelRejected` if ``model`` breaks its kind's invariants."""
    X = model.X
    lam = min_symmetric_eig(X)
    if lam <= PD_TOL:
        raise ModelRejected(
            f"symmetric part of X has minimum eigenvalue {lam:.3e} <= {PD_TOL:g}"
        )
    if model.kind == SINGLE_PHASE:
        if not np.allclose(X, X.T, rtol=0, atol=1e-12 * max(1.0, np.abs(X).max())):
            raise ModelRejected("single-phase X must be symmetric")
        # radial lines on separate laterals share no path, so zeros are legitimate
        if np.any(X < 0):
            raise ModelRejected("single-phase X must have non-negative entries")


def _orient_tree(lines, root):
    """BFS from ``root``; returns (parent edge per node, child order)."""
    adj: dict = {}
    for k, (a, b, r, x) in enumerate(lines):
        if a == b:
            raise TopologyError(f"line {k} is a self-loop at node {a!r}")
        adj.setdefault(a, []).append((b, k))
        adj.setdefault(b, []).append((a, k))
    if root not in adj:
        raise TopologyError(f"root {root!r} does not appear in the line list")
    parent = {root: (None, None)}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w, k in adj[u]:
            if k == parent[u][1]:
                continue
            if w in parent:
                raise TopologyError(f"cycle detected through line {k} ({u!r}-{w!r})")
            parent[w] = (u, k)
            queue.append(w)
    missing = set(adj) - set(parent)
    if missing:
        raise TopologyError(f"nodes not connected to the root: {sorted(map(str, missing))}")
    if len(lines) != len(adj) - 1:
        raise TopologyError("line list has parallel lines or extra edges")
    return parent


def _paths(lines, root, parent, order):
    """Set of edge indices on the root path of every node in ``order``."""
    paths = {root: frozenset()}
    for node in order:
        chain = []
        u = node
        while u not in paths:
            chain.append(u)
            u = parent[u][0]
        for w in reversed(chain):
            paths[w] = paths[parent[w][0]] | {parent[w][1]}
    return [paths[n] for n in order]


def build_radial_sensitivities(lines: Sequence, root, v0: float = 1.0, qhat=None) -> FeederModel:
    """Single-phase LinDistFlow sensitivities of a radial feeder.

    Parameters
    ----------
    lines : sequence of (from, to, r, x)
        Line list, per-unit impedances. Orientation does not matter.
    root : hashable
        Substation node label.

    Returns
    -------
    FeederModel
        ``X[n, m] = 2 * sum of x over lines shared by the root paths of n
        and m``; ``R`` likewise with r. Nodes appear in the order they first
        show up in ``lines``.
    """
    lines = [(a, b, float(r), float(x)) for a, b, r, x in lines]
    if not lines:
        raise TopologyError("feeder needs at least one line")
    for k, (a, b, r, x) in enumerate(lines):
        if r < 0 or x < 0:
            raise ValidationError(f"line {k} ({a!r}-{b!r}) has negative impedance")
    parent = _orient_tree(lines, root)
    order = []
    for a, b, _, _ in lines:
        for node in (a, b):
            if node != root and node not in order:
                order.append(node)
    paths = _paths(lines, root, parent, order)
    r = np.array([ln[2] for ln in lines])
    x = np.array([ln[3] for ln in lines])
    # incidence: A[n, e] = 1 when line e lies on the root path of node n
    A = np.zeros((len(order), len(lines)))
    for i, p in enumerate(paths):
        A[i, list(p)] = 1.0
    R = 2.0 * (A * r) @ A.T
    X = 2.0 * (A * x) @ A.T
    return FeederModel(R=R, X=X, v0=v0, kind=SINGLE_PHASE, nodes=tuple(order), qhat=qhat)


@dataclass(frozen=True)
class Scenario:
    """One grid condition; raw injections are kept when known."""

    vtilde: np.ndarray
    p_g: np.ndarray | None = None
    p_l: np.ndarray | None = None
    q_l: np.ndarray | None = None

    def __post_init__(self):
        for name in ("vtilde", "p_g", "p_l", "q_l"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val))


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple
    source: str = ""

    def __post_init__(self):
        scenarios = tuple(self.scenarios)
        if scenarios:
            n = scenarios[0].vtilde.shape
            if any(s.vtilde.shape != n for s in scenarios):
                raise ValidationError("scenarios disagree on the number of nodes")
        object.__setattr__(self, "scenarios", scenarios)

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    @property
    def vtilde(self) -> np.ndarray:
        """``(S, N)`` array of grid conditions."""
        return np.array([s.vtilde for s in self.scenarios])

    def check_against(self, model: FeederModel) -> None:
        for k, s in enumerate(self.scenarios):
            if s.vtilde.shape != (model.n_nodes,):
                raise ValidationError(
                    f"scenario {k} has {s.vtilde.size} nodes, feeder has {model.n_nodes}"
                )


def _vec(model, a, name):
    a = np.asarray(a, dtype=float)
    if a.shape != (model.n_nodes,):
        raise ValidationError(f"{name} must have length {model.n_nodes}, got shape {a.shape}")
    return a


def make_scenario(model: FeederModel, p_g, p_l, q_l) -> Scenario:
    """Grid condition ``vtilde = R (p_g - p_l) - X q_l + v0``."""
    p_g = _vec(model, p_g, "p_g")
    p_l = _vec(model, p_l, "p_l")
    q_l = _vec(model, q_l, "q_l")
    vtilde = model.R @ (p_g - p_l) - model.X @ q_l + model.v0
    return Scenario(vtilde=vtilde, p_g=p_g, p_l=p_l, q_l=q_l)


def voltage(model: FeederModel, q, scenario) -> np.ndarray:
    """Voltage profile ``X q + vtilde`` for DER reactive injections ``q``."""
    vt = scenario.vtilde if isinstance(scenario, Scenario) else np.asarray(scenario, float)
    q = _vec(model, q, "q")
    if vt.shape != q.shape:
        raise ValidationError("scenario and q have different lengths")
    return model.X @ q + vt


# -- files ---------------------------------------------------------------------

def _read_json(path):
    import json

    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def load_topology(path) -> FeederModel:
    """Radial feeder from ``{"root", "lines": [{"from","to","r","x"}], "v0"}``.

    An optional ``"qhat"`` object maps node labels to inverter capability.
    """
    data = _read_json(path)
    try:
        lines = [(ln["from"], ln["to"], ln["r"], ln["x"]) for ln in data["lines"]]
        root = data["root"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: missing key {exc}") from exc
    model = build_radial_sensitivities(lines, root, v0=data.get("v0", 1.0))
    if "qhat" in data:
        qhat = np.zeros(model.n_nodes)
        lookup = {str(k): i for i, k in enumerate(model.nodes)}
        for label, val in data["qhat"].items():
            if str(label) not in lookup:
                raise ParseError(f"{path}: qhat given for unknown node {label!r}")
            qhat[lookup[str(label)]] = val
        model = FeederModel(model.R, model.X, model.v0, model.kind, model.phases, model.nodes, qhat)
    return model


def load_explicit_model(path) -> FeederModel:
    """Model from ``{"kind", "v0", "R", "X", "phases"}`` (optional ``"qhat"`` list).

    Positive definiteness is tested on the symmetric part of ``X``.
    """
    data = _read_json(path)
    try:
        X = np.array(data["X"], dtype=float)
        R = np.array(data.get("R", np.zeros_like(X)), dtype=float)
        kind = data.get("kind", SINGLE_PHASE)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: matrices are ragged or non-numeric ({exc})") from exc
    except KeyError as exc:
        raise ParseError(f"{path}: missing key {exc}") from exc
    if kind in ("single", "single-phase", "1p"):
        kind = SINGLE_PHASE
    elif kind in ("multi", "multiphase", "3p"):
        kind = MULTIPHASE
    if X.ndim != 2 or X.shape[0] != X.shape[1] or R.shape != X.shape:
        raise ParseError(f"{path}: R {R.shape} and X {X.shape} must be equal square matrices")
    phases = data.get("phases") or ()
    if phases and len(phases) != X.shape[0]:
        raise ParseError(f"{path}: {len(phases)} phase tags for {X.shape[0]} nodes")
    return FeederModel(R=R, X=X, v0=data.get("v0", 1.0), kind=kind, phases=tuple(phases),
                       nodes=tuple(data.get("nodes") or ()), qhat=data.get("qhat"))


def load_model(path) -> FeederModel:
    """Dispatch on content: topology files have ``"lines"``, explicit ones ``"X"``."""
    data = _read_json(path)
    if "lines" in data:
        return load_topology(path)
    if "X" in data:
        return load_explicit_model(path)
    raise ParseError(f"{path}: neither a topology (lines) nor an explicit (X) feeder file")


def load_scenarios(path, model: FeederModel) -> ScenarioSet:
    """Scenario CSV: ``p_g_k, p_l_k, q_l_k`` columns or ``vtilde_k`` columns, ``k = 1..N``."""
    import csv

    n = model.n_nodes
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty scenario file") from None
        rows = list(enumerate(reader, start=2))
    col = {h: i for i, h in enumerate(header)}
    vt_cols = [f"vtilde_{k}" for k in range(1, n + 1)]
    raw = {p: [f"{p}_{k}" for k in range(1, n + 1)] for p in ("p_g", "p_l", "q_l")}
    use_vt = all(c in col for c in vt_cols)
    if not use_vt and not all(c in col for cols in raw.values() for c in cols):
        raise ParseError(f"{path}: expected vtilde_1..vtilde_{n} or p_g/p_l/q_l_1..{n} columns "
                         f"for a {n}-node feeder")
    out = []
    for lineno, row in rows:
        if not row or all(not x.strip() for x in row):
            continue
        try:
            if use_vt:
                out.append(Scenario(vtilde=[float(row[col[c]]) for c in vt_cols]))
            else:
                vals = {p: [float(row[col[c]]) for c in cols] for p, cols in raw.items()}
                out.append(make_scenario(model, vals["p_g"], vals["p_l"], vals["q_l"]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return ScenarioSet(tuple(out), source=str(path))


def write_scenarios(path, scenarios: ScenarioSet, raw: bool = True) -> None:
    """Inverse of :func:`load_scenarios`; raw injections when every scenario has them."""
    import csv

    n = scenarios[0].vtilde.size
    has_raw = raw and all(s.p_g is not None for s in scenarios)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if has_raw:
            w.writerow([f"{p}_{k}" for p in ("p_g", "p_l", "q_l") for k in range(1, n + 1)])
            for s in scenarios:
                w.writerow([repr(float(x)) for x in np.concatenate([s.p_g, s.p_l, s.q_l])])
        else:
            w.writerow([f"vtilde_{k}" for k in range(1, n + 1)])
            for s in scenarios:
                w.writerow([repr(float(x)) for x in s.vtilde])
