"""Built-in losses and constraint functions with analytic derivatives."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .problem import ConstraintSet, LossModel

# ---------------------------------------------------------------- scalar l


def _softplus(u):
    return np.logaddexp(0.0, u)


def scalar_loss(spec):
    """Convex scalar loss l returned as (l, l', l'') callables plus a name.

    ``spec`` is a name or a dict with key ``name`` and parameters:
    linear, quadratic (y + y^2/2), exp, softplus, avar (y^+/alpha).
    """
    if isinstance(spec, dict):
        name, params = spec.get("name"), {k: v for k, v in spec.items() if k != "name"}
    else:
        name, params = spec, {}
    if name == "linear":
        return (lambda y: y, lambda y: np.ones_like(y), lambda y: np.zeros_like(y)), name, params
    if name == "quadratic":
        return (lambda y: y + 0.5 * y * y, lambda y: 1.0 + y, lambda y: np.ones_like(y)), name, params
    if name == "exp":
        return (np.exp, np.exp, np.exp), name, params
    if name == "softplus":
        return (_softplus, expit, lambda y: expit(y) * expit(-y)), name, params
    if name == "avar":
        alpha = float(params.get("alpha", 0.05))
        if not 0.0 < alpha < 1.0:
            raise ValidationError("AV@R level alpha must lie in (0, 1)")
        params = {"alpha": alpha}
        # weak derivative: indicator of the closed set {y >= 0}
        return (lambda y: np.maximum(y, 0.0) / alpha,
                lambda y: (y >= 0.0) / alpha,
                lambda y: np.zeros_like(y)), name, params
    raise ValidationError(f"unknown scalar loss {name!r}; known: linear, quadratic, exp, softplus, avar")


# ---------------------------------------------------------------- payoffs g


def payoff(spec, d):
    """Payoff g: R^d -> R as (value, grad, hess) batched callables.

    Names: identity (d = 1), linear (c), square (|x|^2 / 2), call and
    smooth-call (S0, K, beta) acting on the first coordinate.
    """
    if isinstance(spec, dict):
        name, params = spec.get("name"), {k: v for k, v in spec.items() if k != "name"}
    else:
        name, params = spec, {}
    zero_h = lambda X: np.zeros((X.shape[0], d, d))
    if name == "identity":
        if d != 1:
            raise ValidationError("identity payoff needs d = 1; use 'linear' with c")
        return (lambda X: X[:, 0], lambda X: np.ones_like(X), zero_h), name, params
    if name == "linear":
        c = np.asarray(params.get("c", np.ones(d)), dtype=float).reshape(d)
        params = {"c": c.tolist()}
        return (lambda X: X @ c, lambda X: np.broadcast_to(c, X.shape).copy(), zero_h), name, params
    if name == "square":
        def hess(X):
            return np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy()
        return (lambda X: 0.5 * np.sum(X * X, axis=1), lambda X: X.copy(), hess), name, params
    if name in ("call", "smooth-call"):
        S0 = float(params.get("S0", 1.0))
        K = float(params.get("K", 1.0))
        e0 = np.zeros(d)
        e0[0] = 1.0
        if name == "call":
            params = {"S0": S0, "K": K}
            return (lambda X: np.maximum(S0 * X[:, 0] - K, 0.0),
                    lambda X: (S0 * (S0 * X[:, 0] >= K))[:, None] * e0,
                    zero_h), name, params
        beta = float(params.get("beta", 20.0))
        params = {"S0": S0, "K": K, "beta": beta}
        E00 = np.outer(e0, e0)

        def val(X):
            return _softplus(beta * (S0 * X[:, 0] - K)) / beta

        def grad(X):
            return (S0 * expit(beta * (S0 * X[:, 0] - K)))[:, None] * e0

        def hess(X):
            u = beta * (S0 * X[:, 0] - K)
            return (S0 * S0 * beta * expit(u) * expit(-u))[:, None, None] * E00
        return (val, grad, hess), name, params
    raise ValidationError(f"unknown payoff {name!r}; known: identity, linear, square, call, smooth-call")


# ---------------------------------------------------------------- losses


def _linear(c=(1.0,), rho=1.0, target=(0.0,)):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    target = np.atleast_1d(np.asarray(target, dtype=float))
    d, k, rho = len(c), len(target), float(rho)
    eye = np.eye(k)
    return LossModel(
        d, k,
        lambda X, a: X @ c + 0.5 * rho * np.sum((a - target) ** 2),
        lambda X, a: np.broadcast_to(c, X.shape).copy(),
        lambda X, a: np.broadcast_to(rho * (a - target), (X.shape[0], k)).copy(),
        lambda X, a: np.zeros((X.shape[0], k, d)),
        lambda X, a: np.broadcast_to(rho * eye, (X.shape[0], k, k)).copy(),
        lambda X, a: np.zeros((X.shape[0], d, d)),
        name="linear", params={"c": c.tolist(), "rho": rho, "target": target.tolist()})


def _constant(value=0.0, d=1, k=1):
    d, k, c0 = int(d), int(k), float(value)
    return LossModel(
        d, k,
        lambda X, a: np.full(X.shape[0], c0 + 0.5 * float(a @ a)),
        lambda X, a: np.zeros(X.shape),
        lambda X, a: np.broadcast_to(a, (X.shape[0], k)).copy(),
        lambda X, a: np.zeros((X.shape[0], k, d)),
        lambda X, a: np.broadcast_to(np.eye(k), (X.shape[0], k, k)).copy(),
        lambda X, a: np.zeros((X.shape[0], d, d)),
        name="constant", params={"value": c0, "d": d, "k": k})


def _quadratic_tracking(d=1):
    d = int(d)
    eye = np.eye(d)
    return LossModel(
        d, d,
        lambda X, a: np.sum((a - X) ** 2, axis=1),
        lambda X, a: 2.0 * (X - a),
        lambda X, a: 2.0 * (a - X),
        lambda X, a: np.broadcast_to(-2.0 * eye, (X.shape[0], d, d)).copy(),
        lambda X, a: np.broadcast_to(2.0 * eye, (X.shape[0], d, d)).copy(),
        lambda X, a: np.broadcast_to(2.0 * eye, (X.shape[0], d, d)).copy(),
        name="quadratic-tracking", params={"d": d})


def _quartic(d=1, p=2.0):
    d = int(d)
    return LossModel(
        d, 1,
        lambda X, a: np.sum(X ** 4, axis=1) + 0.5 * a[0] ** 2,
        lambda X, a: 4.0 * X ** 3,
        lambda X, a: np.full((X.shape[0], 1), a[0]),
        lambda X, a: np.zeros((X.shape[0], 1, d)),
        lambda X, a: np.ones((X.shape[0], 1, 1)),
        lambda X, a: 12.0 * X[:, :, None] ** 2 * np.eye(d),
        p=float(p), name="quartic", params={"d": d})


def _regression(k=1):
    """f((x, y), a) = (y - <x, a>)^2; state layout (x_1..x_k, y)."""
    k = int(k)
    d = k + 1
    eye = np.eye(k)

    def resid(X, a):
        return X[:, k] - X[:, :k] @ a

    def grad_x(X, a):
        r = resid(X, a)
        return np.concatenate([-2.0 * r[:, None] * a, 2.0 * r[:, None]], axis=1)

    def cross(X, a):
        r = resid(X, a)
        x = X[:, :k]
        out = np.empty((X.shape[0], k, d))
        out[:, :, :k] = 2.0 * x[:, :, None] * a[None, None, :] - 2.0 * r[:, None, None] * eye
        out[:, :, k] = -2.0 * x
        return out

    def hess_x(X, a):
        v = np.concatenate([-a, [1.0]])
        return np.broadcast_to(2.0 * np.outer(v, v), (X.shape[0], d, d)).copy()

    return LossModel(
        d, k,
        lambda X, a: resid(X, a) ** 2,
        grad_x,
        lambda X, a: -2.0 * resid(X, a)[:, None] * X[:, :k],
        cross,
        lambda X, a: 2.0 * X[:, :k, None] * X[:, None, :k],
        hess_x,
        name="sqrt-regression", params={"k": k})


def _oce(l="quadratic", g="identity", d=1):
    d = int(d)
    (lf, l1, l2), lname, lpar = scalar_loss(l)
    (gv, gg, gh), gname, gpar = payoff(g, d)

    def u(X, a):
        return gv(X) - a[0]

    return LossModel(
        d, 1,
        lambda X, a: lf(u(X, a)) + a[0],
        lambda X, a: l1(u(X, a))[:, None] * gg(X),
        lambda X, a: (1.0 - l1(u(X, a)))[:, None],
        lambda X, a: (-l2(u(X, a))[:, None] * gg(X))[:, None, :],
        lambda X, a: l2(u(X, a))[:, None, None],
        lambda X, a: (l2(u(X, a))[:, None, None] * gg(X)[:, :, None] * gg(X)[:, None, :]
                      + l1(u(X, a))[:, None, None] * gh(X)),
        name="oce", params={"l": {"name": lname, **lpar}, "g": {"name": gname, **gpar}, "d": d})


def _hedging(l="quadratic", g="identity", x0=(1.0,)):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0)
    (lf, l1, l2), lname, lpar = scalar_loss(l)
    (gv, gg, gh), gname, gpar = payoff(g, d)
    eye = np.eye(d)

    def u(X, a):
        return gv(X) + (X - x0) @ a

    def cross(X, a):
        uu = u(X, a)
        v = gg(X) + a
        return (l2(uu)[:, None, None] * (X - x0)[:, :, None] * v[:, None, :]
                + l1(uu)[:, None, None] * eye)

    def hess_x(X, a):
        uu = u(X, a)
        v = gg(X) + a
        return l2(uu)[:, None, None] * v[:, :, None] * v[:, None, :] + l1(uu)[:, None, None] * gh(X)

    return LossModel(
        d, d,
        lambda X, a: lf(u(X, a)),
        lambda X, a: l1(u(X, a))[:, None] * (gg(X) + a),
        lambda X, a: l1(u(X, a))[:, None] * (X - x0),
        cross,
        lambda X, a: l2(u(X, a))[:, None, None] * (X - x0)[:, :, None] * (X - x0)[:, None, :],
        hess_x,
        name="hedging", params={"l": {"name": lname, **lpar}, "g": {"name": gname, **gpar},
                                "x0": x0.tolist()})


def _oce_hedging(l="quadratic", g="identity", x0=(1.0,)):
    """f(x, (H, m)) = l(g(x) + <H, x - x0> + m) - m, action ordered (H_1..H_d, m)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0)
    k = d + 1
    (lf, l1, l2), lname, lpar = scalar_loss(l)
    (gv, gg, gh), gname, gpar = payoff(g, d)
    shift = np.zeros((k, d))
    shift[:d, :] = np.eye(d)

    def u(X, a):
        return gv(X) + (X - x0) @ a[:d] + a[d]

    def vec(X):
        return np.concatenate([X - x0, np.ones((X.shape[0], 1))], axis=1)

    def grad_a(X, a):
        out = l1(u(X, a))[:, None] * vec(X)
        out[:, d] -= 1.0
        return out

    def cross(X, a):
        uu = u(X, a)
        w = gg(X) + a[:d]
        return l2(uu)[:, None, None] * vec(X)[:, :, None] * w[:, None, :] + l1(uu)[:, None, None] * shift

    def hess_x(X, a):
        uu = u(X, a)
        w = gg(X) + a[:d]
        return l2(uu)[:, None, None] * w[:, :, None] * w[:, None, :] + l1(uu)[:, None, None] * gh(X)

    return LossModel(
        d, k,
        lambda X, a: lf(u(X, a)) - a[d],
        lambda X, a: l1(u(X, a))[:, None] * (gg(X) + a[:d]),
        grad_a,
        cross,
        lambda X, a: l2(u(X, a))[:, None, None] * vec(X)[:, :, None] * vec(X)[:, None, :],
        hess_x,
        name="oce-hedging", params={"l": {"name": lname, **lpar}, "g": {"name": gname, **gpar},
                                    "x0": x0.tolist()})


def _payoff_only(g, d=1, name="payoff"):
    (gv, gg, gh), gname, gpar = payoff(g, d)
    return LossModel(
        d, 0,
        lambda X, a: gv(X),
        lambda X, a: gg(X),
        None, None, None,
        lambda X, a: gh(X),
        name=name, params={"g": {"name": gname, **gpar}})


def _call(S0=1.0, K=1.0):
    return _payoff_only({"name": "call", "S0": S0, "K": K}, 1, "call")


def _smooth_call(S0=1.0, K=1.0, beta=20.0, rho=None, forward=1.0):
    """Softplus call surrogate; with ``rho`` it carries a quadratic-cost hedge a.

    f(x, a) = C(x) - a (x - forward) + rho a^2 / 2.
    """
    g = {"name": "smooth-call", "S0": S0, "K": K, "beta": beta}
    if rho is None:
        return _payoff_only(g, 1, "smooth-call")
    (gv, gg, gh), _, gpar = payoff(g, 1)
    rho, fwd = float(rho), float(forward)
    return LossModel(
        1, 1,
        lambda X, a: gv(X) - a[0] * (X[:, 0] - fwd) + 0.5 * rho * a[0] ** 2,
        lambda X, a: gg(X) - a[0],
        lambda X, a: (rho * a[0] - (X[:, 0] - fwd))[:, None],
        lambda X, a: -np.ones((X.shape[0], 1, 1)),
        lambda X, a: np.full((X.shape[0], 1, 1), rho),
        lambda X, a: gh(X),
        name="smooth-call", params={**gpar, "rho": rho, "forward": fwd})


def _anderson_quadratic(g="identity", d=1):
    """f(x, a) = a^2 / 2 - g(x) a."""
    d = int(d)
    (gv, gg, gh), gname, gpar = payoff(g, d)
    return LossModel(
        d, 1,
        lambda X, a: 0.5 * a[0] ** 2 - gv(X) * a[0],
        lambda X, a: -a[0] * gg(X),
        lambda X, a: (a[0] - gv(X))[:, None],
        lambda X, a: -gg(X)[:, None, :],
        lambda X, a: np.ones((X.shape[0], 1, 1)),
        lambda X, a: -a[0] * gh(X),
        name="anderson-quadratic", params={"g": {"name": gname, **gpar}, "d": d})


def _nn(**params):
    from .applications.nn import nn_loss
    return nn_loss(**params)


LOSSES = {
    "linear": _linear,
    "constant": _constant,
    "quadratic-tracking": _quadratic_tracking,
    "quartic": _quartic,
    "sqrt-regression": _regression,
    "regression": _regression,
    "oce": _oce,
    "hedging": _hedging,
    "oce-hedging": _oce_hedging,
    "call": _call,
    "smooth-call": _smooth_call,
    "anderson-quadratic": _anderson_quadratic,
    "nn": _nn,
}


def builtin_loss(name, **params):
    """Catalog loss by id; unknown ids raise with the list of known ones."""
    if name not in LOSSES:
        raise ValidationError(f"unknown loss {name!r}; catalog: {', '.join(sorted(LOSSES))}")
    try:
        return LOSSES[name](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for loss {name!r}: {exc}") from exc


# ---------------------------------------------------------------- constraints


def martingale_constraint(x0):
    """Phi_i(x) = x_i - x0_i for every coordinate."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x0)
    return ConstraintSet(
        d,
        lambda X: X - x0,
        lambda X: np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy(),
        lambda X: np.zeros((X.shape[0], d, d, d)),
        name="martingale", params={"x0": x0.tolist()})


def covariance_constraint(b=0.0):
    """Phi(x) = x_1 x_2 - b on R^2."""
    b = float(b)
    hess = np.array([[0.0, 1.0], [1.0, 0.0]])
    return ConstraintSet(
        1,
        lambda X: (X[:, 0] * X[:, 1] - b)[:, None],
        lambda X: np.stack([X[:, 1], X[:, 0]], axis=1)[:, None, :],
        lambda X: np.broadcast_to(hess, (X.shape[0], 1, 2, 2)).copy(),
        name="covariance", params={"b": b})


def linear_constraint(C, b):
    """Phi(x) = C x - b."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    m, d = C.shape
    return ConstraintSet(
        m,
        lambda X: X @ C.T - b,
        lambda X: np.broadcast_to(C, (X.shape[0], m, d)).copy(),
        lambda X: np.zeros((X.shape[0], m, d, d)),
        name="linear", params={"C": C.tolist(), "b": b.tolist()})


CONSTRAINTS = {"martingale": martingale_constraint, "covariance": covariance_constraint,
               "linear": linear_constraint}


def builtin_constraint(name, **params):
    if name not in CONSTRAINTS:
        raise ValidationError(f"unknown constraint {name!r}; catalog: {', '.join(sorted(CONSTRAINTS))}")
    return CONSTRAINTS[name](**params)


def stack_constraints(sets):
    """Concatenate several constraint sets into one."""
    sets = list(sets)
    if len(sets) == 1:
        return sets[0]
    m = sum(s.m for s in sets)
    return ConstraintSet(
        m,
        lambda X: np.concatenate([s.values(X) for s in sets], axis=1),
        lambda X: np.concatenate([s.grads(X) for s in sets], axis=1),
        (lambda X: np.concatenate([s.hess_fn(X) for s in sets], axis=1))
        if all(s.hess_fn is not None for s in sets) else None,
        name="+".join(s.name for s in sets))
