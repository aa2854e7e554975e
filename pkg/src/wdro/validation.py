"""Benchmark problems and the formula-vs-oracle comparison behind ``wdro validate``."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .catalog import builtin_loss
from .errors import ValidationError
from .measures import DiscreteMeasure, NormSpec, SupportSpec, make_empirical
from .oracle import (OracleConfig, eval_dual, eval_primal_lowerbound, fd_optimizer_slope,
                     fd_value_slope, robust_path)
from .problem import LossModel, solve_base_problem
from .sensitivity import beth, upsilon

DEFAULT_DELTAS = (0.04, 0.02, 0.01, 0.005)


@dataclass
class Problem:
    name: str
    loss: LossModel
    mu: DiscreteMeasure
    norm: NormSpec
    support: SupportSpec | None = None
    note: str = ""


def _lognormal_sample(rng, n, sigma=0.2):
    z = rng.standard_normal(n)
    return np.exp(-0.5 * sigma ** 2 + sigma * z)


def benchmark(name, seed=0, p=2.0):
    """One of the six smooth benchmark problems (50-100 atoms)."""
    rng = np.random.default_rng(seed)
    nrm = NormSpec(2.0, None, p)
    if name == "linear":
        return Problem(name, builtin_loss("linear", c=[1.0, -2.0], rho=1.0, target=[0.5]),
                       make_empirical(rng.standard_normal((60, 2))), nrm)
    if name == "quadratic-tracking":
        return Problem(name, builtin_loss("quadratic-tracking"),
                       make_empirical(rng.standard_normal(60)), nrm)
    if name == "oce-quadratic":
        return Problem(name, builtin_loss("oce", l="quadratic", g="identity"),
                       make_empirical(0.5 * rng.standard_normal(60)), nrm)
    if name == "hedging":
        g = {"name": "smooth-call", "S0": 1.0, "K": 1.0, "beta": 20.0}
        return Problem(name, builtin_loss("hedging", l="quadratic", g=g, x0=[1.0]),
                       make_empirical(_lognormal_sample(rng, 80)), nrm)
    if name == "regression":
        k = 2
        x = rng.standard_normal((80, k))
        y = x @ np.array([1.5, -2.0]) + 0.5 * rng.standard_normal(80)
        return Problem(name, builtin_loss("sqrt-regression", k=k),
                       make_empirical(np.column_stack([x, y])), NormSpec(2.0, (0, 1), p))
    if name == "smooth-call":
        return Problem(name, builtin_loss("smooth-call", S0=1.0, K=1.05, beta=25.0, rho=1.0),
                       make_empirical(_lognormal_sample(rng, 60)), nrm)
    raise ValidationError(f"unknown benchmark {name!r}; known: {', '.join(BENCHMARKS)}")


BENCHMARKS = ("linear", "quadratic-tracking", "oce-quadratic", "hedging", "regression",
              "smooth-call")


@dataclass
class ComparisonRow:
    quantity: str
    formula: float
    oracle: float
    gap: float
    threshold: float
    passed: bool

    def as_tuple(self):
        return (self.quantity, self.formula, self.oracle, self.gap, self.threshold,
                "pass" if self.passed else "FAIL")


@dataclass
class ValidationResult:
    problem: str
    rows: list = field(default_factory=list)
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)


def validate_problem(prob: Problem, deltas=DEFAULT_DELTAS, config=None, bracket_deltas=(0.04, 0.01)):
    """Compare upsilon and beth against finite-difference slopes of the oracle."""
    t0 = time.perf_counter()
    config = config or OracleConfig()
    base = solve_base_problem(prob.loss, prob.mu)
    ups = upsilon(prob.loss, prob.mu, prob.norm, base)
    path = robust_path(prob.loss, prob.mu, prob.norm, deltas, base, True, prob.support, config)
    vs = fd_value_slope(prob.loss, prob.mu, prob.norm, path=path)
    out = ValidationResult(prob.name)
    u = ups.upsilon
    gap = abs(vs.slope - u) / max(u, 1e-12)
    out.rows.append(ComparisonRow("upsilon", u, vs.slope, gap, 0.02, gap <= 0.02))
    out.details["value_secants"] = vs.secants
    if prob.loss.k > 0:
        b = beth(prob.loss, prob.mu, prob.norm, base).beth
        os_ = fd_optimizer_slope(prob.loss, prob.mu, prob.norm, path=path)
        err = float(np.max(np.abs(os_.slope - b)))
        thr = 0.05 * (1.0 + float(np.max(np.abs(b))))
        for j in range(prob.loss.k):
            out.rows.append(ComparisonRow(f"beth[{j}]", float(b[j]), float(os_.slope[j]),
                                          abs(float(os_.slope[j] - b[j])), thr, err <= thr))
        out.details["optimizer_secants"] = os_.secants
    # primal/dual bracket at the base optimizer
    for dlt in bracket_deltas:
        dual = eval_dual(prob.loss, prob.mu, prob.norm, dlt, base.action, prob.support, config)
        low = eval_primal_lowerbound(prob.loss, prob.mu, prob.norm, dlt, base.action, prob.support)
        slack = 1e-7 * (1.0 + abs(dual.value))
        out.rows.append(ComparisonRow(f"bracket@{dlt:g}", low, dual.value, dual.value - low,
                                      slack, low <= dual.value + slack))
    out.seconds = time.perf_counter() - t0
    return out


def format_table(result: ValidationResult):
    lines = [f"problem: {result.problem}",
             f"{'quantity':<14}{'formula':>22}{'oracle':>22}{'gap':>12}{'threshold':>12}  status"]
    for r in result.rows:
        lines.append(f"{r.quantity:<14}{r.formula:>22.15g}{r.oracle:>22.15g}{r.gap:>12.3e}"
                     f"{r.threshold:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    lines.append(f"elapsed: {result.seconds:.2f} s")
    return "\n".join(lines)
