"""Square-root LASSO / Ridge: first-order shrinkage and the exact convex problem."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..errors import ConvergenceError, SingularHessianError, ValidationError
from ..measures import DiscreteMeasure, NormSpec, h_map, make_empirical

FIG3_COEFS = (1.5, -3.0, -2.0, 0.3, -0.5, -0.7, 0.2, 0.5, 1.2, 0.8)


def _split(data: DiscreteMeasure):
    if data.dim < 2:
        raise ValidationError("regression data needs covariates and a response")
    return data.atoms[:, :-1], data.atoms[:, -1], data.weights


def _dual_exponent(s):
    return np.inf if s == 1.0 else s / (s - 1.0)


def _lnorm(v, s):
    return float(NormSpec(s, None, 2.0).norm(v))


@dataclass
class ShrinkageResult:
    a_star: np.ndarray
    first_order: np.ndarray
    beth: np.ndarray
    base_value: float
    D: np.ndarray
    delta: float
    s: float


def ols(data: DiscreteMeasure):
    """a* = D^{-1} int y x dmu and V(0) = int (y^2 - <a*, x> y) dmu."""
    X, y, w = _split(data)
    D = (X * w[:, None]).T @ X
    b = (X * w[:, None]).T @ y
    cond = np.linalg.cond(D)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularHessianError(f"design second-moment matrix D is singular (cond {cond:.3g})")
    a = np.linalg.solve(D, b)
    v0 = float(w @ (y * y) - a @ b)
    return a, v0, D


def sqrt_regression_shrinkage(data: DiscreteMeasure, s=2.0, delta=0.0):
    """First-order robust estimator a* - sqrt(V(0)) D^{-1} h(a*) delta."""
    a, v0, D = ols(data)
    if s == 1.0 and np.any(a == 0.0):
        raise ValidationError("s = 1 needs an OLS estimate without zero components "
                              "(h = sign is discontinuous there)")
    h = h_map(NormSpec(s, None, 2.0), a)
    b = -np.sqrt(max(v0, 0.0)) * np.linalg.solve(D, h)
    return ShrinkageResult(a, a + b * delta, b, v0, D, float(delta), float(s))


def orthonormal_closed_form(y, X, s, delta):
    """Shrinkage for centred data with orthonormal design columns (X^T X = I).

    s = 2: a* (1 - delta sqrt(N (1/R^2 - 1))); s = 1: a* - sqrt(N) |y| sqrt(1 - R^2) sign(a*) delta.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    N = len(y)
    a = X.T @ y
    yy = float(y @ y)
    r2 = float(a @ a) / yy
    if s == 2.0:
        return a * (1.0 - delta * np.sqrt(N * (1.0 / r2 - 1.0)))
    if s == 1.0:
        return a - np.sqrt(N) * np.sqrt(yy) * np.sqrt(1.0 - r2) * np.sign(a) * delta
    raise ValidationError("closed forms exist for s = 1 and s = 2 only")


@dataclass
class ExactResult:
    action: np.ndarray
    objective: float
    optimality_residual: float


def sqrt_regression_objective(data: DiscreteMeasure, a, s, delta):
    X, y, w = _split(data)
    r = y - X @ a
    return float(np.sqrt(w @ (r * r)) + delta * _lnorm(a, s))


def exact_sqrt_regression(data: DiscreteMeasure, s=2.0, delta=0.0, tol=1e-10):
    """Global minimizer of sqrt(int (y - <a, x>)^2 dmu) + delta |a|_s.

    The objective is convex. Zero is tested first through its subgradient
    condition; otherwise s = 1 is solved as a bound-constrained smooth
    problem in (a+, a-), and s > 1 by BFGS (smooth away from a = 0).
    """
    X, y, w = _split(data)
    k = X.shape[1]
    a_ols, v0, D = ols(data)
    if delta == 0.0:
        return ExactResult(a_ols, float(np.sqrt(max(v0, 0.0))), 0.0)
    r_dual = _dual_exponent(s)
    Xw = X * w[:, None]
    yy = float(w @ (y * y))
    g0 = -(Xw.T @ y) / np.sqrt(yy)
    if _lnorm(g0, r_dual) <= delta:
        return ExactResult(np.zeros(k), float(np.sqrt(yy)), 0.0)

    def mse_parts(a):
        r = y - X @ a
        m = float(w @ (r * r))
        return m, -2.0 * (Xw.T @ r)

    if s == 1.0:
        def fun(z):
            a = z[:k] - z[k:]
            m, gm = mse_parts(a)
            sq = np.sqrt(m)
            ga = gm / (2.0 * sq)
            return sq + delta * np.sum(z), np.concatenate([ga + delta, -ga + delta])
        z0 = np.concatenate([np.maximum(a_ols, 0.0), np.maximum(-a_ols, 0.0)])
        res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * (2 * k),
                       options={"ftol": 1e-16, "gtol": 1e-13, "maxiter": 20000, "maxcor": 30})
        a = res.x[:k] - res.x[k:]
        a = _polish_l1(a, data, delta, tol)
    else:
        def fun(a):
            m, gm = mse_parts(a)
            sq = np.sqrt(m)
            n = _lnorm(a, s)
            gn = h_map(NormSpec(s, None, 2.0), a)
            return sq + delta * n, gm / (2.0 * sq) + delta * gn
        res = minimize(fun, a_ols, jac=True, method="BFGS", options={"gtol": tol, "maxiter": 5000})
        a = res.x
    resid = _optimality_residual(data, a, s, delta)
    if resid > 1e-6:
        raise ConvergenceError(f"square-root regression solver stalled (residual {resid:.3g})",
                               best=a, residual=resid)
    return ExactResult(a, sqrt_regression_objective(data, a, s, delta), resid)


def _polish_l1(a, data, delta, tol):
    """Newton refinement on the active set of an s = 1 solution."""
    X, y, w = _split(data)
    a = a.copy()
    for _ in range(50):
        active = np.abs(a) > 1e-10 * (1.0 + np.max(np.abs(a)))
        if not np.any(active):
            return a
        sg = np.sign(a[active])
        Xa = X[:, active]
        r = y - X @ a
        m = float(w @ (r * r))
        sq = np.sqrt(m)
        gm = -(Xa * w[:, None]).T @ r
        g = gm / sq + delta * sg
        Hm = (Xa * w[:, None]).T @ Xa
        H = Hm / sq - np.outer(gm, gm) / sq ** 3
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return a
        new = a.copy()
        new[active] += step
        if np.any(np.sign(new[active]) != sg):
            return a
        a = new
        if np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(a))):
            break
    return a


def _optimality_residual(data, a, s, delta):
    """Distance of 0 from the subdifferential of the objective at a."""
    X, y, w = _split(data)
    r = y - X @ a
    sq = np.sqrt(float(w @ (r * r)))
    g = -((X * w[:, None]).T @ r) / sq
    if s == 1.0:
        nz = a != 0.0
        res_nz = g[nz] + delta * np.sign(a[nz])
        res_z = np.maximum(np.abs(g[~nz]) - delta, 0.0)
        return float(np.max(np.abs(np.concatenate([res_nz, res_z])))) if a.size else 0.0
    if np.all(a == 0.0):
        return max(_lnorm(g, _dual_exponent(s)) - delta, 0.0)
    return float(np.max(np.abs(g + delta * h_map(NormSpec(s, None, 2.0), a))))


def figure3_data(seed=0, n=2000, coefs=FIG3_COEFS, noise=1.0):
    """Y = sum_j coef_j X_j + eps with X_j, eps iid standard normal."""
    rng = np.random.default_rng(seed)
    coefs = np.asarray(coefs, dtype=float)
    X = rng.standard_normal((n, len(coefs)))
    y = X @ coefs + noise * rng.standard_normal(n)
    return make_empirical(np.column_stack([X, y]))


def figure3_rows(data: DiscreteMeasure, delta=0.1, s=1.0):
    """Rows (coordinate, a*, exact a*_delta, first-order a*_delta, exact shift, first-order shift)."""
    fo = sqrt_regression_shrinkage(data, s, delta)
    ex = exact_sqrt_regression(data, s, delta)
    rows = []
    for j in range(len(fo.a_star)):
        rows.append((j + 1, fo.a_star[j], ex.action[j], fo.first_order[j],
                     ex.action[j] - fo.a_star[j], fo.first_order[j] - fo.a_star[j]))
    return rows
