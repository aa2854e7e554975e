"""Command-line entry point: ``wdro <command> --spec PATH --out DIR``.

Exit status: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ._numerics import fmt, write_csv, write_json
from .catalog import builtin_constraint, builtin_loss, stack_constraints
from .errors import NumericalError, ValidationError, WdroError
from .measures import DiscreteMeasure, NormSpec, SupportSpec, load_measure, make_empirical
from .oracle import OracleConfig, eval_dual, eval_dual_constrained, eval_primal_lowerbound
from .problem import solve_base_problem
from .sensitivity import beth, upsilon, upsilon_constrained

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------- spec loading


def read_spec(path):
    if path is None:
        raise ValidationError("--spec is required for this command")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"spec {path} is not valid JSON: {exc}") from exc


def _loss_from(obj):
    if isinstance(obj, str):
        return builtin_loss(obj)
    obj = dict(obj)
    name = obj.pop("name", None)
    if name is None:
        raise ValidationError("loss needs a 'name'")
    params = obj.pop("params", {})
    params.update(obj)
    return builtin_loss(name, **params)


def _measure_from(obj, base_dir):
    if obj is None:
        raise ValidationError("spec needs a 'measure'")
    if isinstance(obj, str):
        obj = {"path": obj}
    if "path" in obj:
        path = obj["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return load_measure(path)
    if "weights" not in obj and "atoms" in obj:
        return make_empirical(obj["atoms"])
    try:
        return DiscreteMeasure.from_dict(obj)
    except KeyError as exc:
        raise ValidationError(f"measure is missing {exc}") from exc


def _norm_from(spec):
    n = spec.get("norm", {}) or {}
    p = float(spec.get("p", n.get("p", 2.0)))
    active = n.get("active")
    return NormSpec(float(n.get("s", 2.0)), None if active is None else tuple(active), p)


def _constraints_from(spec):
    items = spec.get("constraints")
    if not items:
        return None
    sets = []
    for c in items:
        c = {"name": c} if isinstance(c, str) else dict(c)
        name = c.pop("name")
        params = c.pop("params", {})
        params.update(c)
        sets.append(builtin_constraint(name, **params))
    return stack_constraints(sets)


class Problem:
    """A fully parsed problem spec."""

    def __init__(self, spec, base_dir="."):
        self.spec = spec
        self.loss = _loss_from(spec.get("loss") or _missing("loss"))
        self.mu = _measure_from(spec.get("measure"), base_dir)
        self.norm = _norm_from(spec)
        self.constraints = _constraints_from(spec)
        self.support = SupportSpec.from_dict(spec.get("support"))
        a0 = spec.get("a0", spec.get("a_star"))
        self.a0 = None if a0 is None else np.asarray(a0, dtype=float)
        if self.mu.dim != self.loss.d:
            raise ValidationError(f"measure dimension {self.mu.dim} does not match the loss "
                                  f"state dimension {self.loss.d}")


def _missing(key):
    raise ValidationError(f"spec needs a '{key}'")


def parse_deltas(text):
    if text is None:
        return None
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"--deltas must be a comma-separated list of numbers, got {text!r}") from None
    if not vals or any(not (v >= 0 and np.isfinite(v)) for v in vals):
        raise ValidationError("radii must be finite and nonnegative")
    return vals


def _oracle_config(args):
    cfg = OracleConfig(seed=args.seed)
    if args.tol is not None:
        if not args.tol > 0:
            raise ValidationError("--tol must be positive")
        cfg = OracleConfig(seed=args.seed, tol=args.tol)
    return cfg


def _emit(args, name, payload):
    payload = {"command": args.command, "seed": args.seed, **payload}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, name), payload)
    return payload


def _base_action(prob):
    if prob.loss.k == 0:
        return np.zeros(0)
    if prob.a0 is not None and prob.spec.get("a_star") is not None:
        return prob.a0
    return solve_base_problem(prob.loss, prob.mu, prob.a0).action


# ---------------------------------------------------------------- commands


def cmd_upsilon(args):
    spec = read_spec(args.spec)
    prob = Problem(spec, os.path.dirname(os.path.abspath(args.spec)))
    a = _base_action(prob)
    if prob.constraints is not None:
        rep = upsilon_constrained(prob.loss, prob.mu, prob.norm, prob.constraints, a)
    else:
        rep = upsilon(prob.loss, prob.mu, prob.norm, a)
    print(f"upsilon = {fmt(rep.upsilon)}")
    _emit(args, "upsilon.json", {"report": rep.to_dict()})
    return EXIT_OK


def cmd_beth(args):
    spec = read_spec(args.spec)
    prob = Problem(spec, os.path.dirname(os.path.abspath(args.spec)))
    rep = beth(prob.loss, prob.mu, prob.norm, _base_action(prob), strict=spec.get("strict", True))
    print("beth = [" + ", ".join(fmt(v) for v in rep.beth) + "]")
    _emit(args, "beth.json", {"report": rep.to_dict()})
    return EXIT_OK


def cmd_oracle(args):
    spec = read_spec(args.spec)
    prob = Problem(spec, os.path.dirname(os.path.abspath(args.spec)))
    deltas = parse_deltas(args.deltas) or [float(d) for d in spec.get("deltas", [spec.get("delta", 0.0)])]
    cfg = _oracle_config(args)
    a = _base_action(prob)
    rows, results = [], []
    for d in deltas:
        if prob.constraints is not None:
            val, eta, inner = eval_dual_constrained(prob.loss, prob.mu, prob.norm, d, prob.constraints,
                                                    a, prob.support, cfg)
            low = float("nan")
            res = {"delta": d, "value": val, "eta": eta, "lambda_star": inner.lambda_star}
        else:
            r = eval_dual(prob.loss, prob.mu, prob.norm, d, a, prob.support, cfg)
            low = eval_primal_lowerbound(prob.loss, prob.mu, prob.norm, d, a, prob.support)
            val = r.value
            res = {"delta": d, "value": val, "lambda_star": r.lambda_star, "primal_lower_bound": low,
                   "transport_cost": r.transport_cost}
        rows.append((d, val, low))
        results.append(res)
        print(f"delta = {fmt(d)}  value = {fmt(val)}  primal bound = {fmt(low)}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "oracle.csv"), ["delta", "value", "primal_lower_bound"], rows)
    _emit(args, "oracle.json", {"action": a, "results": results})
    return EXIT_OK


def cmd_validate(args):
    from .validation import BENCHMARKS, Problem as Bench, benchmark, format_table, validate_problem
    deltas = parse_deltas(args.deltas) or (0.04, 0.02, 0.01, 0.005)
    cfg = _oracle_config(args)
    if args.spec is not None:
        spec = read_spec(args.spec)
        if "problem" in spec:
            probs = [benchmark(spec["problem"], args.seed, float(spec.get("p", 2.0)))]
        else:
            prob = Problem(spec, os.path.dirname(os.path.abspath(args.spec)))
            probs = [Bench(spec.get("name", prob.loss.name), prob.loss, prob.mu, prob.norm, prob.support)]
    else:
        names = BENCHMARKS if args.problem in (None, "all") else [args.problem]
        probs = [benchmark(n, args.seed) for n in names]
    out, ok = [], True
    for prob in probs:
        res = validate_problem(prob, deltas, cfg)
        print(format_table(res))
        ok &= res.passed
        out.append({"problem": res.problem, "passed": res.passed, "seconds": res.seconds,
                    "rows": [r.as_tuple() for r in res.rows]})
    _emit(args, "validate.json", {"deltas": list(deltas), "results": out})
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_figures(args):
    from .applications.finance import BlackScholesSpec, robust_call_curve, upsilon_vega_curve
    from .applications.regression import figure3_data, figure3_rows
    spec = read_spec(args.spec) if args.spec else {}
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    bs = spec.get("black_scholes", {})
    bss = BlackScholesSpec(bs.get("S0", 1.0), bs.get("K", 1.2), bs.get("T", 1.0), bs.get("sigma", 0.2))
    deltas = parse_deltas(args.deltas) or spec.get("deltas") or [0.0, 0.0025, 0.005, 0.01, 0.02, 0.03,
                                                                 0.05, 0.075, 0.1]
    cfg = _oracle_config(args)
    summary, failed = {}, []
    try:
        rows, ups = robust_call_curve(bss, deltas, n_atoms=int(bs.get("n_atoms", 400)), config=cfg)
        write_csv(os.path.join(out, "fig1_bs.csv"), ["delta", "robust_value", "first_order"], rows)
        summary["fig1"] = {"upsilon": ups, "rows": len(rows)}
    except WdroError as exc:
        failed.append(f"fig1: {exc}")
    strikes = np.linspace(0.5, 1.5, int(spec.get("n_strikes", 101)))
    rows2 = upsilon_vega_curve(strikes, bss.S0, bss.T, bss.sigma)
    write_csv(os.path.join(out, "fig2_upsilon_vega.csv"), ["strike", "upsilon", "vega"], rows2)
    summary["fig2"] = {"rows": len(rows2)}
    try:
        data = figure3_data(args.seed, int(spec.get("n_obs", 2000)))
        rows3 = figure3_rows(data, float(spec.get("lasso_delta", 0.1)), float(spec.get("lasso_s", 1.0)))
        write_csv(os.path.join(out, "fig3_lasso.csv"),
                  ["coordinate", "a_star", "exact", "first_order", "exact_shift", "first_order_shift"],
                  rows3)
        summary["fig3"] = {"rows": len(rows3)}
    except WdroError as exc:
        failed.append(f"fig3: {exc}")
    for msg in failed:
        print(msg, file=sys.stderr)
    _emit(args, "figures.json", {"figures": summary, "failures": failed})
    print(f"wrote figure data to {out}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_clt(args):
    from .applications.clt import CltStudyConfig, clt_study
    spec = read_spec(args.spec)
    loss = _loss_from(spec.get("loss") or _missing("loss"))
    norm = _norm_from(spec)
    cfg = CltStudyConfig(spec.get("sampler") or _missing("sampler"), int(spec.get("N", 400)),
                         int(spec.get("M", 200)), args.seed,
                         int(spec.get("reference_size", 200_000)))
    rep = clt_study(cfg, loss, norm, _oracle_config(args))
    d = rep.to_dict()
    print("empirical mean = [" + ", ".join(fmt(v) for v in d["empirical_mean"]) + "]")
    print("predicted mean = [" + ", ".join(fmt(v) for v in d["predicted_mean_shift"]) + "]")
    print("z-scores       = [" + ", ".join(fmt(v) for v in d["z_scores"]) + "]")
    print(f"N x out-of-sample error: {fmt(d['oos_scaled_mean'])} (predicted {fmt(d['oos_predicted'])})")
    _emit(args, "clt.json", {"report": d})
    return EXIT_OK


COMMANDS = {"upsilon": cmd_upsilon, "beth": cmd_beth, "oracle": cmd_oracle,
            "validate": cmd_validate, "figures": cmd_figures, "clt": cmd_clt}


def build_parser():
    parser = argparse.ArgumentParser(prog="wdro", description="Sensitivity of Wasserstein "
                                     "distributionally robust values and optimizers.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"upsilon": "value sensitivity at radius 0",
             "beth": "optimizer sensitivity at radius 0",
             "oracle": "robust value by the dual oracle on a radius grid",
             "validate": "compare formulas against finite-difference oracle slopes",
             "figures": "write fig1_bs.csv, fig2_upsilon_vega.csv, fig3_lasso.csv",
             "clt": "Monte Carlo study of robust estimators at radius 1/sqrt(N)"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--spec", help="problem spec (JSON)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--deltas", help="comma-separated radius grid")
        p.add_argument("--tol", type=float, help="oracle tolerance override")
        if name == "validate":
            p.add_argument("--problem", help="benchmark id or 'all' (default: all)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
