import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm as normal

from wdro import (DiscreteMeasure, LossModel, NormSpec, ValidationError, beth,
                  builtin_loss, eval_dual, fd_value_slope, make_empirical, upsilon)
from wdro.errors import SingularHessianError
from wdro.applications.clt import (CltStudyConfig, anderson_first_order_gap, clt_study,
                                   truth_quantities)
from wdro.applications.finance import (BlackScholesSpec, avar_loss, avar_robust_value,
                                       avar_upsilon, bs_call_price, bs_call_upsilon, bs_vega,
                                       call_upsilon_empirical, empirical_avar, lognormal_measure,
                                       oce_sensitivities, upsilon_vega_curve)
from wdro.applications.nn import nn_loss, nn_robustness, pack, train_nn
from wdro.applications.regression import (exact_sqrt_regression, figure3_data, figure3_rows, ols,
                                          orthonormal_closed_form, sqrt_regression_objective,
                                          sqrt_regression_shrinkage)
from wdro.applications.uq import (Ball, Box, HalfSpace, LinearMap, SmoothMap, distance_loss,
                                  uq_first_order)

E2 = NormSpec(2.0, None, 2.0)
FIG = BlackScholesSpec(1.0, 1.2, 1.0, 0.2)


# ---------------------------------------------------------------- Black-Scholes


def test_bs_upsilon_and_vega_reference_values():
    assert FIG.d_minus == pytest.approx(-1.01161, abs=1e-5)
    m = normal.cdf(FIG.d_minus)
    assert bs_call_upsilon(FIG) == pytest.approx(math.sqrt(m * (1 - m)), abs=1e-14)
    assert bs_call_upsilon(FIG) == pytest.approx(0.3628, abs=1e-4)
    assert bs_vega(FIG) == pytest.approx(normal.pdf(FIG.d_plus), abs=1e-14)
    assert bs_vega(FIG) == pytest.approx(0.2870, abs=5e-5)


def test_bs_limits():
    assert bs_call_upsilon(BlackScholesSpec(1.0, 1e-8)) < 1e-12
    median = math.exp(-0.5 * 0.2 ** 2)
    assert bs_call_upsilon(BlackScholesSpec(2.0, 2.0 * median)) == pytest.approx(1.0, abs=1e-12)
    assert bs_vega(BlackScholesSpec(1.0, 20.0)) < 1e-12
    atm = math.exp(0.5 * 0.2 ** 2)
    assert bs_vega(BlackScholesSpec(1.0, atm)) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-14)


def test_bs_spec_validation():
    with pytest.raises(ValidationError):
        BlackScholesSpec(1.0, 1.2, 1.0, 0.0)
    with pytest.raises(ValidationError):
        BlackScholesSpec(-1.0)


def test_lognormal_discretization():
    mu = lognormal_measure(FIG, 10_000)
    assert abs(mu.mean()[0] - 1.0) <= 1e-4
    price = mu.integrate(np.maximum(mu.atoms[:, 0] - 1.2, 0.0))
    assert price == pytest.approx(bs_call_price(FIG), rel=1e-3)


def test_bs_upsilon_is_the_empirical_limit():
    emp = call_upsilon_empirical(lognormal_measure(FIG, 100_000), FIG.S0, FIG.K)
    assert abs(emp - bs_call_upsilon(FIG)) / bs_call_upsilon(FIG) <= 5e-3


def test_call_upsilon_empirical_examples():
    mu = make_empirical([0.8, 1.0, 1.2, 1.4])
    assert call_upsilon_empirical(mu, 2.0, 2.2) == pytest.approx(1.0, abs=1e-15)
    assert call_upsilon_empirical(mu, 1.0, 1.5) == 0.0
    # an atom at k belongs to [k, inf)
    assert call_upsilon_empirical(mu, 1.0, 1.4) == pytest.approx(math.sqrt(0.25 * 0.75), abs=1e-15)
    for S0 in (0.3, 3.0, 7.1):
        assert call_upsilon_empirical(mu, S0, S0 * 1.2) == pytest.approx(S0 * 0.5, abs=1e-15)
    with pytest.raises(ValidationError):
        call_upsilon_empirical(make_empirical(np.ones((3, 2))), 1.0, 1.0)


def test_upsilon_vega_curve_shape():
    K = np.linspace(0.5, 1.5, 101)
    rows = np.array(upsilon_vega_curve(K))
    ups = rows[:, 1]
    i = int(np.argmax(ups))
    assert np.all(np.diff(ups[: i + 1]) >= 0) and np.all(np.diff(ups[i:]) <= 0)
    assert ups.max() <= 0.5 + 1e-12
    assert K[i] == pytest.approx(math.exp(-0.02), abs=0.01)


# ---------------------------------------------------------------- AV@R and OCE


def test_avar_upsilon_examples():
    assert avar_upsilon([0.6, 0.8], 0.04) == pytest.approx(5.0, abs=1e-12)
    assert avar_upsilon([1.0], 1 - 1e-12) == pytest.approx(1.0, abs=1e-9)
    assert avar_upsilon([0.0, 0.0], 0.3) == 0.0
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValidationError):
            avar_upsilon([1.0], bad)


def test_empirical_avar_matches_rockafellar_uryasev(rng):
    mu = make_empirical(rng.standard_normal((200, 2)))
    z = np.array([1.0, 0.5])
    val, var = empirical_avar(mu, z, 0.05)
    loss = avar_loss(z, 0.05)
    grid = np.linspace(var - 1, var + 1, 2001)
    best = min(loss.expected(mu, [m]) for m in grid)
    assert val == pytest.approx(best, abs=1e-6)
    assert val == pytest.approx(loss.expected(mu, [var]), abs=1e-12)


def test_avar_first_order_is_exact_small_sample(rng):
    mu = make_empirical(rng.standard_normal((60, 2)))
    z = np.array([0.6, 0.8])
    v0 = empirical_avar(mu, z, 0.1)[0]
    for delta in (0.02, 0.1):
        v, _ = avar_robust_value(mu, z, 0.1, delta)
        assert v == pytest.approx(v0 + avar_upsilon(z, 0.1) * delta, rel=1e-6)


def test_oce_quadratic_two_atom_example():
    mu = make_empirical([-1.0, 1.0])
    rep = oce_sensitivities("quadratic", "identity", mu, E2)
    assert rep.a_star[0] == pytest.approx(0.0, abs=1e-9)
    assert rep.upsilon == pytest.approx(math.sqrt(2.0), abs=1e-9)
    loss = builtin_loss("oce", l="quadratic", g="identity")
    est = fd_value_slope(loss, mu, E2, deltas=(0.004, 0.002, 0.001, 0.0005))
    assert est.slope == pytest.approx(math.sqrt(2.0), rel=1e-3)


def test_oce_linear_l_has_zero_beth(rng):
    mu = make_empirical(rng.standard_normal((30, 2)))
    rep = oce_sensitivities("linear", {"name": "square"}, mu, E2)
    np.testing.assert_array_equal(rep.beth, 0.0)
    # l' = 1, so Upsilon is the L^q norm of grad g
    norms = np.linalg.norm(mu.atoms, axis=1)
    assert rep.upsilon == pytest.approx(math.sqrt(mu.integrate(norms ** 2)), abs=1e-12)


def test_oce_hedging_upsilon_integrand(rng):
    mu = make_empirical(1.0 + 0.2 * rng.standard_normal((40, 1)))
    rep = oce_sensitivities("quadratic", {"name": "smooth-call", "K": 1.0, "beta": 10.0}, mu, E2,
                            kind="hedging", x0=[1.0])
    a = rep.a_star
    x = mu.atoms[:, 0]
    y = np.logaddexp(0.0, 10.0 * (x - 1.0)) / 10.0 + a[0] * (x - 1.0)
    gg = 1.0 / (1.0 + np.exp(-10.0 * (x - 1.0)))
    integrand = (1.0 + y) * (gg + a[0])
    assert rep.upsilon == pytest.approx(math.sqrt(mu.integrate(integrand ** 2)), rel=1e-9)


def test_oce_singular_curvature_errors():
    # l'' = 0 while the mixed term of the hedge is the identity
    mu = DiscreteMeasure([[-1.0], [2.0]], [2 / 3, 1 / 3])
    with pytest.raises(SingularHessianError, match="curvature"):
        oce_sensitivities("linear", "square", mu, NormSpec(2.0, None, 3.0), kind="hedging", x0=[0.0])


# ---------------------------------------------------------------- shrinkage


def _orthonormal(rng, N, k):
    X = rng.standard_normal((N, k))
    X -= X.mean(axis=0)
    Q, _ = np.linalg.qr(X)
    y = Q @ rng.standard_normal(k) + 0.7 * rng.standard_normal(N)
    y -= y.mean()
    return Q, y


@pytest.mark.parametrize("s", [1.0, 2.0])
def test_orthonormal_closed_forms(rng, s):
    for _ in range(5):
        Q, y = _orthonormal(rng, 50, 3)
        data = make_empirical(np.column_stack([Q, y]))
        delta = 0.01
        fo = sqrt_regression_shrinkage(data, s, delta)
        np.testing.assert_allclose(fo.first_order, orthonormal_closed_form(y, Q, s, delta),
                                   rtol=0, atol=1e-10)


def test_orthonormal_s2_is_scalar_multiple(rng):
    Q, y = _orthonormal(rng, 40, 4)
    fo = sqrt_regression_shrinkage(make_empirical(np.column_stack([Q, y])), 2.0, 0.02)
    ratio = fo.first_order / fo.a_star
    np.testing.assert_allclose(ratio, ratio[0], atol=1e-12)
    assert ratio[0] < 1.0


def test_shrinkage_direction_many_datasets():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        X = rng.standard_normal((60, k))
        y = X @ rng.standard_normal(k) + rng.standard_normal(60)
        fo = sqrt_regression_shrinkage(make_empirical(np.column_stack([X, y])), 1.0, 0.05)
        assert np.all(np.sign(fo.a_star) * (fo.first_order - fo.a_star) <= 0.0)


def test_shrinkage_errors():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    data = make_empirical(np.column_stack([X, y]))
    with pytest.raises(ValidationError, match="zero components"):
        sqrt_regression_shrinkage(data, 1.0, 0.1)
    sing = make_empirical(np.column_stack([np.ones(4), np.ones(4), np.arange(4.0)]))
    with pytest.raises(SingularHessianError):
        sqrt_regression_shrinkage(sing, 2.0, 0.1)


def test_exact_regression_limits(rng):
    X = rng.standard_normal((80, 3))
    y = X @ [1.0, -0.5, 0.2] + rng.standard_normal(80)
    data = make_empirical(np.column_stack([X, y]))
    np.testing.assert_allclose(exact_sqrt_regression(data, 1.0, 0.0).action, ols(data)[0], atol=1e-8)
    full = exact_sqrt_regression(data, 1.0, 50.0)
    np.testing.assert_array_equal(full.action, 0.0)
    assert sqrt_regression_objective(data, np.zeros(3), 1.0, 50.0) < \
        sqrt_regression_objective(data, ols(data)[0], 1.0, 50.0)


@pytest.mark.parametrize("s", [1.0, 1.5, 2.0])
def test_exact_regression_is_a_minimizer(rng, s):
    X = rng.standard_normal((100, 4))
    y = X @ [2.0, 0.0, -1.0, 0.1] + rng.standard_normal(100)
    data = make_empirical(np.column_stack([X, y]))
    res = exact_sqrt_regression(data, s, 0.1)
    assert res.optimality_residual <= 1e-6
    f0 = sqrt_regression_objective(data, res.action, s, 0.1)
    for _ in range(50):
        trial = res.action + 1e-3 * rng.standard_normal(4)
        assert sqrt_regression_objective(data, trial, s, 0.1) >= f0 - 1e-12


def test_figure3_rows_consistent():
    data = figure3_data(0, 2000)
    rows = figure3_rows(data, 0.1, 1.0)
    ex = exact_sqrt_regression(data, 1.0, 0.1).action
    assert len(rows) == 10
    np.testing.assert_array_equal([r[2] for r in rows], ex)
    for r in rows:
        assert abs(r[3] - r[2]) <= 0.10 * abs(r[2])


# ---------------------------------------------------------------- networks


def test_zero_network_metric(rng):
    data = make_empirical(np.column_stack([rng.standard_normal(50), rng.standard_normal(50)]))
    a = np.zeros(nn_loss().k)
    val = nn_robustness((1, 8, 1), a, data, E2)
    assert val == pytest.approx(2.0 * math.sqrt(np.mean(data.atoms[:, 1] ** 2)), abs=1e-12)


def test_linear_network_matches_regression_integrand(rng):
    X = rng.standard_normal((40, 2))
    y = X @ [1.0, -1.0] + 0.3 * rng.standard_normal(40)
    data = make_empirical(np.column_stack([X, y]))
    A1 = rng.standard_normal((3, 2))
    b1 = np.zeros(3)
    A2 = rng.standard_normal((1, 3))
    params = pack(A1, b1, A2, np.zeros(1))
    coef = (A2 @ A1).ravel()
    reg = builtin_loss("regression", k=2)
    expect = upsilon(reg, data, E2, coef).upsilon
    got = nn_robustness((2, 3, 1), params, data, E2, activation="identity")
    assert got == pytest.approx(expect, abs=1e-10)


def test_network_gradients_match_finite_differences(rng):
    loss = nn_loss((2, 4, 1), 2.0, "softplus")
    X = rng.standard_normal((6, 3))
    a = rng.standard_normal(loss.k)
    h = 1e-6
    gx = loss.grad_x(X, a)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        np.testing.assert_allclose(gx[:, j], (loss.value(X + e, a) - loss.value(X - e, a)) / (2 * h),
                                   rtol=1e-6, atol=1e-7)
    ga = loss.grad_a(X, a)
    for j in range(loss.k):
        e = np.zeros(loss.k)
        e[j] = h
        np.testing.assert_allclose(ga[:, j], (loss.value(X, a + e) - loss.value(X, a - e)) / (2 * h),
                                   rtol=1e-6, atol=1e-7)


def test_trained_network_metric_matches_oracle_slope():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 200)
    data = make_empirical(np.column_stack([x, np.sin(x) + 0.1 * rng.standard_normal(200)]))
    params, loss = train_nn(data, (1, 8, 1), seed=0)
    metric = nn_robustness((1, 8, 1), params, data, E2)
    est = fd_value_slope(loss, data, E2, deltas=(0.02, 0.01, 0.005, 0.0025), a_star=params,
                         reoptimize=False)
    assert abs(est.slope - metric) <= 0.03 * metric


def test_nonsmooth_activation_rejected():
    with pytest.raises(ValidationError, match="smooth surrogate"):
        nn_loss(activation="relu")


# ---------------------------------------------------------------- UQ


def test_uq_scaled_identity(rng):
    c = 2.5
    X = 0.6 * rng.standard_normal((200, 2))
    mu = make_empirical(X)
    G = LinearMap(c * np.eye(2))
    E = Ball([0.0, 0.0], 1.0)
    for p in (1.5, 2.0, 3.0):
        nrm = NormSpec(2.0, None, p)
        res = uq_first_order(G, E, mu, nrm, 0.01)
        outside = float(np.mean(np.linalg.norm(c * X, axis=1) > 1.0))
        assert res.outside_mass == pytest.approx(outside, abs=1e-15)
        assert res.slope == pytest.approx(c * outside ** (1.0 / nrm.q), abs=1e-12)
        assert res.first_order == pytest.approx(res.base - 0.01 * res.slope, abs=1e-15)


def test_uq_all_inside():
    mu = make_empirical([[0.1, 0.2], [-0.3, 0.0]])
    res = uq_first_order(LinearMap(np.eye(2)), Box([-1, -1], [1, 1]), mu, E2, 0.1)
    assert res.base == 0.0 and res.slope == 0.0


def test_uq_ball_example_against_oracle():
    mu = make_empirical([[2.0, 0.0], [0.0, 0.0]])
    G, E = LinearMap(np.eye(2)), Ball([0.0, 0.0], 1.0)
    res = uq_first_order(G, E, mu, E2, 0.1)
    assert res.base == pytest.approx(0.5, abs=1e-15)
    assert res.slope == pytest.approx(math.sqrt(0.5), abs=1e-15)
    # inf over the ball equals minus the sup of -d
    for delta in (0.05, 0.2):
        inf_val = -eval_dual(distance_loss(G, E, 2), mu, E2, delta).value
        assert inf_val == pytest.approx(0.5 - math.sqrt(0.5) * delta, abs=1e-8)


def test_uq_boundary_atoms_named():
    mu = make_empirical([[1.0, 0.0], [3.0, 0.0]])
    with pytest.raises(ValidationError, match=r"\[0\]"):
        uq_first_order(LinearMap(np.eye(2)), Ball([0, 0], 1.0), mu, E2, 0.1)
    with pytest.raises(ValidationError):
        uq_first_order(LinearMap(np.eye(2)), Ball([0, 0], 1.0), mu, NormSpec(2.0, None, 1.0), 0.1)


def test_uq_nonlinear_map_against_oracle(rng):
    def value(X):
        return np.column_stack([X[:, 0] + 0.3 * np.sin(X[:, 1]), X[:, 1] + 0.5 * np.sin(X[:, 1])])

    def jac(X):
        J = np.zeros((len(X), 2, 2))
        J[:, 0, 0] = 1.0
        J[:, 0, 1] = 0.3 * np.cos(X[:, 1])
        J[:, 1, 1] = 1.0 + 0.5 * np.cos(X[:, 1])
        return J

    G = SmoothMap(value, jac)
    E = HalfSpace([1.0, 1.0], 0.5)
    mu = make_empirical(rng.standard_normal((40, 2)))
    res = uq_first_order(G, E, mu, E2, 0.01)
    est = fd_value_slope(distance_loss(G, E, 2), mu, E2, deltas=(0.004, 0.002, 0.001, 0.0005))
    assert abs(est.slope - res.slope) <= 0.02 * res.slope


def test_projections():
    Z = np.array([[3.0, 4.0], [0.1, 0.1]])
    np.testing.assert_allclose(Ball([0, 0], 1).project(Z), [[0.6, 0.8], [0.1, 0.1]])
    np.testing.assert_allclose(Box([0, 0], [1, 1]).project(Z), [[1.0, 1.0], [0.1, 0.1]])
    np.testing.assert_allclose(HalfSpace([0, 1], 0.0).project(Z), [[3.0, 0.0], [0.1, 0.0]])


# ---------------------------------------------------------------- CLT


def test_clt_quadratic_mean_within_three_se():
    cfg = CltStudyConfig({"kind": "normal", "mean": 0.3, "std": 1.0}, N=400, M=200, seed=1,
                         reference_size=50_000)
    rep = clt_study(cfg, builtin_loss("quadratic-tracking"), E2)
    # zero in the population; the reference sample leaves a small residual
    assert abs(rep.truth.mean_shift[0]) <= 0.02
    assert abs(rep.mean[0]) <= 3 * rep.standard_error[0]
    assert rep.n_ok == 200 and rep.failures == []


def test_clt_regression_shift():
    cfg = CltStudyConfig({"kind": "linear-gaussian", "coefs": [1.0, -2.0], "noise": 1.0},
                         N=400, M=200, seed=2, reference_size=100_000)
    rep = clt_study(cfg, builtin_loss("regression", k=2), NormSpec(2.0, (0, 1), 2.0))
    shift = rep.truth.mean_shift
    np.testing.assert_allclose(shift, -np.array([1.0, -2.0]) / math.sqrt(5.0), atol=0.02)
    assert np.all(np.abs(rep.z_scores()) <= 3.0)
    assert np.all(np.sign(rep.mean) == np.sign(shift))


def test_clt_is_thread_independent(monkeypatch):
    cfg = CltStudyConfig({"kind": "normal", "mean": 0.0}, N=50, M=12, seed=5, reference_size=2000)
    loss = builtin_loss("oce", l="softplus", g="identity")
    monkeypatch.setenv("WDRO_THREADS", "1")
    a = clt_study(cfg, loss, E2).scaled_errors
    monkeypatch.setenv("WDRO_THREADS", "4")
    b = clt_study(cfg, loss, E2).scaled_errors
    np.testing.assert_array_equal(a, b)


def test_clt_config_errors():
    with pytest.raises(ValidationError):
        CltStudyConfig({"kind": "normal"}, N=0, M=5)
    with pytest.raises(ValidationError):
        CltStudyConfig({"kind": "uniform"}, N=5, M=5)
    cfg = CltStudyConfig({"kind": "normal", "mean": [0.0, 0.0]}, N=5, M=5)
    with pytest.raises(ValidationError, match="dimension"):
        clt_study(cfg, builtin_loss("quadratic-tracking"), E2)


def test_separable_theta_is_zero(rng):
    ref = make_empirical(rng.standard_normal((500, 1)))
    sep = LossModel(1, 1, lambda X, a: np.sin(X[:, 0]) + 0.5 * (a[0] - 1) ** 2,
                    lambda X, a: np.cos(X),
                    lambda X, a: np.full((len(X), 1), a[0] - 1.0),
                    lambda X, a: np.zeros((len(X), 1, 1)),
                    lambda X, a: np.ones((len(X), 1, 1)))
    t = truth_quantities(sep, E2, ref)
    np.testing.assert_array_equal(t.theta, 0.0)
    np.testing.assert_array_equal(t.mean_shift, 0.0)
    np.testing.assert_allclose(t.cov, t.cov_h, rtol=1e-12)


@pytest.mark.parametrize("p", [1.5, 2.0, 4.0])
def test_anderson_gap_matches_beth(rng, p):
    mu = make_empirical(0.5 + rng.standard_normal((80, 1)))
    g = {"name": "smooth-call", "K": 0.3, "beta": 3.0}
    loss = builtin_loss("anderson-quadratic", g=g)
    nrm = NormSpec(2.0, None, p)
    rep = beth(loss, mu, nrm)
    gap = anderson_first_order_gap(g, mu, rep.a_star, p, 0.1)
    assert gap == pytest.approx(rep.beth[0] * 0.1, rel=1e-10)


# ---------------------------------------------------------------- properties


@settings(max_examples=1000)
@given(st.lists(st.floats(0.2, 3.0), min_size=1, max_size=30), st.floats(0.1, 5.0), st.floats(0.1, 3.0))
def test_call_upsilon_bounded_by_half_s0(xs, S0, K):
    v = call_upsilon_empirical(make_empirical(xs), S0, K)
    assert 0.0 <= v <= 0.5 * S0 + 1e-15


@settings(max_examples=1000)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 3.0), st.floats(1e-4, 0.2))
def test_shrinkage_moves_against_penalty(seed, s, delta):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 3))
    y = X @ rng.standard_normal(3) + rng.standard_normal(30)
    fo = sqrt_regression_shrinkage(make_empirical(np.column_stack([X, y])), s, delta)
    # first-order move is a descent direction for the penalty in the D-metric
    h_move = fo.first_order - fo.a_star
    assert float(h_move @ fo.D @ fo.a_star) <= 1e-12 * (1 + np.linalg.norm(fo.a_star) ** 2)
