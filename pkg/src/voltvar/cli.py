"""Command-line front end.

Every command that writes a file also writes ``<file>.manifest.json`` next
to it. The manifest carries the timestamp, so the primary outputs stay
byte-identical across runs with the same inputs and seed.

Exit codes: 0 success, 2 input error, 3 infeasible design problem,
4 non-convergence where convergence is required.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import GridSpec, enumerate_equilibrium, grid_search_ord, kkt_residual
from .dynamics import (equilibrium_coordinate_descent, equilibrium_fixed_point, simulate)
from .exceptions import (BoundaryAmbiguity, ConvergenceError, InfeasibleError, KindError,
                         ValidationError)
from .feeder import load_model, load_scenarios
from .io import dump_json, file_digest, load_rules, rule_to_dict, save_rules, write_trace
from .rules import RuleParams, default_rule
from .stability import min_depth, polytopic_check, spectral_check
from .trainer import STANDARD_INIT, TrainConfig, check_design, equilibria, evaluate_detailed, train

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NONCONVERGENCE = 0, 2, 3, 4

log = logging.getLogger("voltvar")


# -- helpers ----------------------------------------------------------------------

def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise ValidationError(f"{args.command} needs {', '.join(missing)}")


def _feeder(args):
    _require(args, "feeder")
    return load_model(args.feeder)


def _scenarios(args, model):
    _require(args, "scenarios")
    return load_scenarios(args.scenarios, model)


def _rules(args, model) -> RuleParams:
    _require(args, "rules")
    params = load_rules(args.rules)
    if params.n_nodes != model.n_nodes:
        raise ValidationError(f"{args.rules}: rule file has {params.n_nodes} nodes, "
                              f"feeder has {model.n_nodes}")
    return params


def _qhat(model, args):
    if model.qhat is None:
        raise ValidationError(f"{args.feeder}: feeder file gives no inverter capabilities (qhat)")
    return model.qhat


def _scenario_vector(scen, index, path):
    if not 0 <= index < len(scen):
        raise ValidationError(f"{path}: scenario index {index} out of range (0..{len(scen) - 1})")
    return scen[index].vtilde


def _config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_manifest(args, outputs):
    inputs = {}
    for key in ("feeder", "rules", "scenarios", "init"):
        p = getattr(args, key, None)
        if p and Path(p).is_file():
            inputs[key] = {"path": str(p), "sha256": file_digest(p)}
    for out in outputs:
        manifest = {
            "command": args.command,
            "config": _config(args),
            "inputs": inputs,
            "seed": getattr(args, "seed", None),
            "tool_version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "output": {"path": str(out), "sha256": file_digest(out)},
        }
        dump_json(manifest, f"{out}.manifest.json")


def _emit(args, obj, outputs):
    """Print ``obj`` as JSON, or write it to ``--out`` (plus its manifest)."""
    if args.out:
        dump_json(obj, args.out)
        outputs = [args.out, *outputs]
    else:
        sys.stdout.write(dump_json(obj))
    if outputs:
        _write_manifest(args, outputs)


# -- commands ---------------------------------------------------------------------

def cmd_feeder_validate(args):
    model = _feeder(args)
    sym = 0.5 * (model.X + model.X.T)
    info = {
        "kind": model.kind,
        "n_nodes": model.n_nodes,
        "nodes": list(model.nodes),
        "v0": model.v0,
        "x_spectral_norm": float(np.linalg.norm(model.X, 2)),
        "x_min_eig_sym": float(np.linalg.eigvalsh(sym)[0]),
        "qhat": None if model.qhat is None else model.qhat.tolist(),
    }
    if args.scenarios:
        scen = load_scenarios(args.scenarios, model)
        vt = scen.vtilde
        info["scenarios"] = {"count": len(scen), "vtilde_min": float(vt.min()),
                             "vtilde_max": float(vt.max())}
    _emit(args, info, [])
    return EXIT_OK


def cmd_stability(args):
    model = _feeder(args)
    params = _rules(args, model)
    cert = spectral_check(model.X, params.alpha, args.epsilon, kind=model.kind)
    out = cert.as_dict()
    out["polytopic_pass"] = polytopic_check(model, params.alpha, args.epsilon)
    qh = params.qhat * params.der_mask
    out["min_depth_for"] = {"eps1": args.eps1,
                            "T": min_depth(model.X, qh, args.epsilon, args.eps1)}
    _emit(args, out, [])
    return EXIT_OK


def cmd_simulate(args):
    model = _feeder(args)
    params = _rules(args, model)
    scen = _scenarios(args, model)
    vt = _scenario_vector(scen, args.scenario_index, args.scenarios)
    trace = simulate(model, params, vt, T_max=args.steps, tol=args.tol)
    summary = {"converged": trace.converged, "settle_steps": trace.settle_steps,
               "final_gap": trace.final_gap}
    if args.out:
        write_trace(args.out, trace)
        summary_path = args.summary or f"{args.out}.summary.json"
        dump_json(summary, summary_path)
        _write_manifest(args, [args.out, summary_path])
    else:
        sys.stdout.write(dump_json(summary))
    return EXIT_OK


def cmd_equilibrium(args):
    model = _feeder(args)
    params = _rules(args, model)
    scen = _scenarios(args, model)
    vt = _scenario_vector(scen, args.scenario_index, args.scenarios)
    if args.method == "fixed-point":
        res = equilibrium_fixed_point(model, params, vt, tol=args.tol)
    elif args.method == "coordinate-descent":
        res = equilibrium_coordinate_descent(model, params, vt, tol=args.tol)
    else:
        res = enumerate_equilibrium(model, params, vt)
    d = res.as_dict()
    if model.is_single_phase:
        d["kkt_residual"] = kkt_residual(model, params, vt, res.q_star)[0]
    _emit(args, d, [])
    return EXIT_OK


def _init_point(args, model):
    if args.init in (None, "standard"):
        return STANDARD_INIT
    if args.init == "default":
        return default_rule(_qhat(model, args), model.qhat > 0)
    return _rules(argparse.Namespace(**{**vars(args), "rules": args.init}), model)


def cmd_design(args):
    model = _feeder(args)
    scen = _scenarios(args, model)
    _require(args, "out")
    z_init = _init_point(args, model)
    if isinstance(z_init, RuleParams):
        qhat, mask = z_init.qhat, z_init.der_mask
    else:
        qhat = _qhat(model, args)
        mask = qhat > 0
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, epsilon=args.epsilon,
                      optimizer=args.optimizer, seed=args.seed, z_init=z_init, depth=args.depth)
    report = train(model, scen, cfg, qhat=qhat, der_mask=mask)
    save_rules(report.final_params, args.out)
    outputs = [args.out]
    rep = report.as_dict()
    rep["design_check"] = check_design(model, report.final_params, args.epsilon)
    rep["objective"] = {
        "none": evaluate_detailed(model, None, scen).objective,
        "default": evaluate_detailed(model, default_rule(qhat, mask), scen).objective,
        "optimized": evaluate_detailed(model, report.final_params, scen).objective,
    }
    if args.report:
        dump_json(rep, args.report)
        outputs.append(args.report)
    _write_manifest(args, outputs)
    log.info("final loss %.6e", report.loss_per_epoch[-1] if report.loss_per_epoch else float("nan"))
    return EXIT_OK


def cmd_evaluate(args):
    model = _feeder(args)
    scen = _scenarios(args, model)
    params = _rules(args, model) if args.rules else None
    ev = evaluate_detailed(model, params, scen, tol=args.tol, threads=args.threads)
    out = {"objective": ev.objective, "per_scenario": ev.per_scenario,
           "failed": ev.failed, "rules": args.rules or "none"}
    _emit(args, out, [])
    if ev.failed and args.strict:
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_verify(args):
    model = _feeder(args)
    params = _rules(args, model)
    scen = _scenarios(args, model)
    if not model.is_single_phase:
        raise KindError(f"{args.feeder}: KKT verification needs a single-phase feeder")
    q, ok = equilibria(model, params, scen.vtilde, tol=1e-13, threads=args.threads)
    rows = []
    for s in range(len(scen)):
        r, _ = kkt_residual(model, params, scen.vtilde[s], q[s])
        rows.append({"scenario": s, "kkt_residual": r, "converged": bool(ok[s])})
    worst = max((r["kkt_residual"] for r in rows), default=0.0)
    out = {"residuals": rows, "max_residual": worst, "tol": args.tol,
           "pass": bool(worst <= args.tol and ok.all())}
    _emit(args, out, [])
    if not ok.all():
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_oracle(args):
    model = _feeder(args)
    scen = _scenarios(args, model)
    _require(args, "out")
    res = grid_search_ord(model, scen, args.epsilon, GridSpec(), qhat=_qhat(model, args))
    save_rules(res.params, args.out)
    outputs = [args.out]
    grid_csv = args.grid_csv or f"{args.out}.grid.csv"
    m = res.candidates.shape[1]
    with open(grid_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["index"]
        for j in range(m):
            head += [f"vref_{j + 1}", f"delta_{j + 1}", f"sigma_{j + 1}", f"alpha_{j + 1}"]
        w.writerow(head + ["objective"])
        for k, (cand, obj) in enumerate(zip(res.candidates, res.objectives)):
            w.writerow([k] + [repr(float(x)) for x in cand.ravel()] + [repr(float(obj))])
    outputs.append(grid_csv)
    _write_manifest(args, outputs)
    sys.stdout.write(dump_json({"objective": res.objective, "candidates": int(len(res.objectives)),
                                "best_index": res.best_index}))
    return EXIT_OK


def cmd_profile(args):
    model = _feeder(args)
    scen = _scenarios(args, model)
    _require(args, "out")
    optimized = _rules(args, model)
    default = default_rule(optimized.qhat, optimized.der_mask)
    vt = scen.vtilde
    cols = {}
    for name, params in (("none", None), ("default", default), ("optimized", optimized)):
        q, ok = equilibria(model, params, vt, tol=args.tol, threads=args.threads)
        cols[name] = (q @ model.X.T + vt, ok)
    labels = model.nodes or tuple(str(k + 1) for k in range(model.n_nodes))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "bus", "v_none", "v_default", "v_optimized",
                    "converged_default", "converged_optimized"])
        for s in range(vt.shape[0]):
            for k in range(model.n_nodes):
                w.writerow([s, labels[k]] + [repr(float(cols[c][0][s, k]))
                                              for c in ("none", "default", "optimized")]
                           + [int(cols["default"][1][s]), int(cols["optimized"][1][s])])
    _write_manifest(args, [args.out])
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--feeder", help="topology or explicit-model JSON")
    common.add_argument("--rules", help="rule JSON")
    common.add_argument("--scenarios", help="scenario CSV")
    common.add_argument("--out", help="output file (stdout when omitted, where allowed)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="scenario-level worker threads")
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="voltvar", description="Volt/VAR rule design and analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, tol):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func, default_tol=tol)
        return sp

    add("feeder-validate", cmd_feeder_validate, "parse a feeder (and scenarios) and summarise", None)

    sp = add("stability", cmd_stability, "stability certificate of a rule", None)
    sp.add_argument("--epsilon", type=float, default=0.5)
    sp.add_argument("--eps1", type=float, default=1e-6)

    sp = add("simulate", cmd_simulate, "iterate the closed-loop dynamics", 1e-7)
    sp.add_argument("--scenario-index", type=int, default=0)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--summary", help="summary JSON path (default <out>.summary.json)")

    sp = add("equilibrium", cmd_equilibrium, "equilibrium of one scenario", 1e-12)
    sp.add_argument("--scenario-index", type=int, default=0)
    sp.add_argument("--method", choices=("fixed-point", "coordinate-descent", "enumerate"),
                    default="fixed-point")

    sp = add("design", cmd_design, "train rules by projected gradient descent", None)
    sp.add_argument("--epsilon", type=float, default=0.5)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--init", default=None,
                    help="'standard' (default), 'default' for the default rule, or a rule JSON path")
    sp.add_argument("--optimizer", choices=("adam", "plain"), default="adam")
    sp.add_argument("--depth", type=int, default=None, help="fixed twin depth")
    sp.add_argument("--report", help="training report JSON")

    sp = add("evaluate", cmd_evaluate, "objective of a rule (no --rules: no compensation)", 1e-12)
    sp.add_argument("--strict", action="store_true", help="exit 4 if any scenario fails to converge")

    add("verify", cmd_verify, "KKT residuals of equilibria per scenario", 1e-6)

    sp = add("oracle", cmd_oracle, "grid-search reference design (at most two DERs)", None)
    sp.add_argument("--epsilon", type=float, default=0.5)
    sp.add_argument("--grid-csv", help="candidate CSV path (default <out>.grid.csv)")

    add("profile", cmd_profile, "per-bus voltages under no, default and optimized rules", 1e-12)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.tol is None:
        args.tol = args.default_tol if args.default_tol is not None else 1e-12
    del args.default_tol
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: infeasible: {exc}", file=sys.stderr)
        for row in exc.binding:
            print(f"  binding: {row}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, BoundaryAmbiguity) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
