"""Rule files, dynamics traces and JSON helpers."""
from __future__ import annotations

import csv
import hashlib
import json

import numpy as np

from .exceptions import ParseError
from .rules import RuleParams, convert


def rule_to_dict(params: RuleParams) -> dict:
    """Rule file content; curves are stored as ``(vref, delta, sigma, qbar)``."""
    d = {
        "parameterization": ",".join(params.parameterization),
        "vref": params.vref.tolist(),
        "delta": params.delta.tolist(),
        "sigma": params.sigma.tolist(),
        "qbar": params.qbar.tolist(),
        "qhat": params.qhat.tolist(),
        "der_mask": params.der_mask.tolist(),
    }
    d["alpha"] = params.alpha.tolist()
    return d


def rule_from_dict(d: dict, source: str = "<dict>") -> RuleParams:
    try:
        p = RuleParams(vref=d["vref"], delta=d["delta"], sigma=d["sigma"], qbar=d["qbar"],
                       qhat=d["qhat"], der_mask=d.get("der_mask"))
    except KeyError as exc:
        raise ParseError(f"{source}: rule file lacks {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    tag = d.get("parameterization")
    return convert(p, tag) if tag else p


def load_rules(path) -> RuleParams:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return rule_from_dict(data, str(path))


def dump_json(obj, path=None) -> str:
    """Deterministic JSON (sorted keys, fixed float repr)."""
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def save_rules(params: RuleParams, path) -> None:
    dump_json(rule_to_dict(params), path)


def write_trace(path, trace) -> None:
    """Trace CSV with columns ``t, q_1..q_N, v_1..v_N``."""
    q = trace.q
    v = trace.v
    n = q.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"q_{k}" for k in range(1, n + 1)] + [f"v_{k}" for k in range(1, n + 1)])
        for t in range(q.shape[0]):
            w.writerow([t] + [repr(float(x)) for x in q[t]] + [repr(float(x)) for x in v[t]])


def read_trace(path):
    """Returns ``(t, q, v)`` arrays from a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n = (len(header) - 1) // 2
    return body[:, 0].astype(int), body[:, 1:1 + n], body[:, 1 + n:]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
