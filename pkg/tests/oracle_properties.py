"""Randomized oracle properties, run by the acceptance suite (criterion 9).

Kept out of the collected modules so the slow 1000-case runs execute once.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wdro import (DiscreteMeasure, LossModel, NormSpec, builtin_loss, eval_dual,
                  eval_primal_lowerbound, wasserstein_distance)


@st.composite
def oracle_problem(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    p = draw(st.sampled_from([1.5, 2.0, 3.0]))
    s = draw(st.sampled_from([1.5, 2.0, 3.0]))
    kinds = ["linear", "smooth-call", "oce-softplus"] + (["quadratic-tracking", "regression"] if p >= 2 else [])
    kind = draw(st.sampled_from(kinds))
    n = draw(st.integers(1, 5))
    if kind == "linear":
        loss, dim = builtin_loss("linear", c=rng.standard_normal(2).tolist()), 2
    elif kind == "smooth-call":
        loss, dim = builtin_loss("smooth-call", S0=1.0, K=1.0, beta=5.0), 1
    elif kind == "oce-softplus":
        loss, dim = builtin_loss("oce", l="softplus", g={"name": "linear", "c": [1.0, -0.5]}, d=2), 2
    elif kind == "quadratic-tracking":
        loss, dim = builtin_loss("quadratic-tracking", d=2), 2
    else:
        loss, dim = builtin_loss("regression", k=1), 2
    w = rng.random(n) + 0.2
    mu = DiscreteMeasure(1.0 + 0.5 * rng.standard_normal((n, dim)), w / w.sum())
    a = 0.5 * rng.standard_normal(loss.k)
    delta = draw(st.floats(0.001, 0.5))
    return loss, mu, a, NormSpec(s, None, p), delta


@settings(max_examples=1000)
@given(oracle_problem())
def check_duality_bracket(prob):
    loss, mu, a, nrm, delta = prob
    dual = eval_dual(loss, mu, nrm, delta, a).value
    low = eval_primal_lowerbound(loss, mu, nrm, delta, a)
    assert low <= dual + 1e-7 * (1.0 + abs(dual))
    assert dual >= loss.expected(mu, a) - 1e-12 * (1.0 + abs(dual))


@settings(max_examples=1000)
@given(oracle_problem())
def check_displaced_measure_feasible(prob):
    loss, mu, a, nrm, delta = prob
    r = eval_dual(loss, mu, nrm, delta, a)
    assert wasserstein_distance(mu, r.worst_case, nrm) <= delta * (1.0 + 1e-6)
    assert loss.expected(r.worst_case, a) == pytest.approx(r.value, rel=1e-6, abs=1e-7)


@settings(max_examples=200)
@given(oracle_problem(), st.floats(0.5, 0.95))
def check_value_monotone_in_radius(prob, shrink):
    loss, mu, a, nrm, delta = prob
    small = eval_dual(loss, mu, nrm, shrink * delta, a).value
    big = eval_dual(loss, mu, nrm, delta, a).value
    assert small <= big + 1e-9 * (1.0 + abs(big))


@st.composite
def separated_measure(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n = draw(st.integers(1, 6))
    dim = draw(st.integers(1, 3))
    idx = rng.choice(1000, size=n, replace=False)
    grid = np.stack(np.unravel_index(idx, (10,) * 3), axis=1)[:, :dim].astype(float)
    if len(np.unique(grid, axis=0)) < n:
        grid = np.arange(n, dtype=float)[:, None] * np.ones(dim)
    atoms = 10.0 * grid + 0.1 * rng.standard_normal((n, dim))
    w = rng.random(n) + 0.2
    return DiscreteMeasure(atoms, w / w.sum())


@settings(max_examples=1000)
@given(separated_measure(), st.sampled_from([1.5, 2.0, 3.0]), st.sampled_from([1.5, 2.0, 3.0]),
       st.floats(0.05, 0.5), st.integers(0, 2 ** 31))
def check_pushforward_radius_exact(mu, p, s, delta, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(mu.dim)
    loss = LossModel(mu.dim, 0, lambda X, a: np.sin(X @ c) + X @ c,
                     lambda X, a: (np.cos(X @ c) + 1.0 + 1e-3)[:, None] * c)
    nrm = NormSpec(s, None, p)
    _, nu = eval_primal_lowerbound(loss, mu, nrm, delta, np.zeros(0), return_measure=True)
    assert wasserstein_distance(mu, nu, nrm) == pytest.approx(delta, abs=1e-9)
