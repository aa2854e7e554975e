import numpy as np
import pytest

from wdro import (ConvergenceError, LossModel, ValidationError, builtin_constraint,
                  builtin_loss, check_growth, make_empirical, solve_base_problem)
from wdro.catalog import LOSSES, stack_constraints

CATALOG = [
    ("linear", dict(c=[1.0, -2.0], rho=1.0, target=[0.5])),
    ("constant", dict(value=1.5, d=2, k=1)),
    ("quadratic-tracking", dict(d=2)),
    ("quartic", dict(d=2)),
    ("regression", dict(k=2)),
    ("oce", dict(l="quadratic", g="identity")),
    ("oce", dict(l="exp", g={"name": "smooth-call", "S0": 1.0, "K": 1.0, "beta": 10.0})),
    ("oce", dict(l="softplus", g={"name": "linear", "c": [1.0, 0.5]}, d=2)),
    ("hedging", dict(l="quadratic", g={"name": "smooth-call", "S0": 1.0, "K": 1.0, "beta": 10.0},
                     x0=[1.0])),
    ("oce-hedging", dict(l="quadratic", g="square", x0=[1.0])),
    ("smooth-call", dict(S0=1.0, K=1.05, beta=20.0, rho=1.0)),
    ("smooth-call", dict(S0=1.0, K=1.05, beta=20.0)),
    ("anderson-quadratic", dict(g="square")),
    ("nn", dict(widths=(1, 3, 1))),
]


def _fd(fun, v, eps=1e-6):
    out = []
    for i in range(v.shape[-1]):
        e = np.zeros_like(v)
        e[..., i] = eps
        out.append((fun(v + e) - fun(v - e)) / (2 * eps))
    return np.stack(out, axis=-1)


def _close(analytic, fd):
    mag = np.max(np.abs(fd)) if fd.size else 0.0
    np.testing.assert_allclose(analytic, fd, atol=max(1e-6, 1e-4 * mag), rtol=0)


@pytest.mark.parametrize("name,params", CATALOG, ids=[f"{n}-{i}" for i, (n, _) in enumerate(CATALOG)])
def test_analytic_derivatives_match_finite_differences(name, params):
    loss = builtin_loss(name, **params)
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = 1.0 + 0.3 * rng.standard_normal((1, loss.d))
        a = 0.5 * rng.standard_normal(loss.k)
        if loss.flags.get("grad_x") == "analytic":
            _close(loss.grad_x(x, a), _fd(lambda v: loss.value(v, a), x))
        if loss.k and loss.flags.get("grad_a") == "analytic":
            _close(loss.grad_a(x, a)[0], _fd(lambda b: loss.value(x, b)[0], a))
        if loss.k and loss.flags.get("cross") == "analytic":
            fd = np.stack([_fd(lambda v: loss.grad_a(v, a)[:, j], x)[0] for j in range(loss.k)])
            _close(loss.cross(x, a)[0], fd)
        if loss.k and loss.flags.get("hess_a") == "analytic":
            _close(loss.hess_a(x, a)[0], _fd(lambda b: loss.grad_a(x, b)[0], a))
        if loss.flags.get("hess_x") == "analytic":
            fd = np.stack([_fd(lambda v: loss.grad_x(v, a)[:, j], x)[0] for j in range(loss.d)])
            _close(loss.hess_x(x, a)[0], fd)


def test_finite_difference_fallbacks_are_flagged():
    loss = LossModel(1, 1, lambda X, a: (X[:, 0] - a[0]) ** 2)
    assert loss.flags["grad_x"] == "finite-difference"
    x = np.array([[0.3], [1.2]])
    np.testing.assert_allclose(loss.grad_x(x, np.array([0.1])), 2 * (x - 0.1), atol=1e-6)
    np.testing.assert_allclose(loss.cross(x, np.array([0.1]))[:, 0, 0], [-2.0, -2.0], atol=1e-4)


def test_orientation_of_mixed_derivative():
    loss = builtin_loss("regression", k=2)
    assert loss.cross(np.zeros((3, 3)), np.zeros(2)).shape == (3, 2, 3)


def test_unknown_loss_lists_catalog():
    with pytest.raises(ValidationError, match="quadratic-tracking"):
        builtin_loss("nope")
    with pytest.raises(ValidationError):
        builtin_loss("linear", bogus=1)


def test_catalog_keys_cover_benchmarks():
    for key in ("linear", "quadratic-tracking", "oce", "hedging", "regression", "smooth-call"):
        assert key in LOSSES


def test_solve_base_problem_quadratic_mean(rng):
    mu = make_empirical(rng.standard_normal((40, 2)))
    cert = solve_base_problem(builtin_loss("quadratic-tracking", d=2), mu)
    np.testing.assert_allclose(cert.action, mu.mean(), atol=1e-10)
    assert cert.residual <= 1e-8 and cert.source == "solved"


def test_solve_base_problem_regression_is_ols(rng):
    X = rng.standard_normal((50, 2))
    y = X @ [1.0, -0.5] + 0.1 * rng.standard_normal(50)
    mu = make_empirical(np.column_stack([X, y]))
    cert = solve_base_problem(builtin_loss("regression", k=2), mu)
    np.testing.assert_allclose(cert.action, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-9)


def test_solve_base_problem_unbounded_raises():
    loss = LossModel(1, 1, lambda X, a: X[:, 0] * 0 - a[0], grad_a_fn=lambda X, a: -np.ones((len(X), 1)))
    with pytest.raises(ConvergenceError):
        solve_base_problem(loss, make_empirical([0.0, 1.0]))


def test_growth_check_flags_superquadratic():
    mu = make_empirical(np.linspace(-1, 1, 11))
    assert check_growth(builtin_loss("quadratic-tracking"), mu, p=2.0).passed
    assert not check_growth(builtin_loss("quartic"), mu, [0.0], p=2.0).passed


def test_scaled_and_shifted_loss():
    loss = builtin_loss("quadratic-tracking")
    sc = loss.scaled(-2.0, 3.0)
    x, a = np.array([[1.5]]), np.array([0.5])
    assert sc.value(x, a)[0] == pytest.approx(-2.0 * 1.0 + 3.0)
    np.testing.assert_allclose(sc.grad_x(x, a), -2.0 * loss.grad_x(x, a))


def test_constraints_gradients_and_calibration(rng):
    C = builtin_constraint("covariance", b=0.0)
    x = rng.standard_normal((5, 2))
    fd = np.stack([_fd(lambda v: C.values(v)[:, 0], x[i:i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(C.grads(x)[:, 0, :], fd, atol=1e-6)
    mu = make_empirical([[1.0, 1.0], [-1.0, 1.0]])
    assert C.calibration_residual(mu)[0] == pytest.approx(0.0)
    both = stack_constraints([builtin_constraint("martingale", x0=[0.0, 1.0]), C])
    assert both.m == 3 and both.grads(x).shape == (5, 3, 2)
    with pytest.raises(ValidationError):
        builtin_constraint("nonsense")
