"""One-hidden-layer network losses and the data-perturbation robustness metric."""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from ..errors import ValidationError
from ..measures import DiscreteMeasure, NormSpec
from ..problem import LossModel
from ..sensitivity import lq_norm

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, np.ones_like),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))),
}


def _check_activation(activation):
    if activation not in ACTIVATIONS:
        raise ValidationError(
            f"activation {activation!r} is not supported; the sensitivity needs a differentiable "
            f"network, use a smooth surrogate such as 'softplus' for relu or 'tanh' "
            f"(available: {', '.join(ACTIVATIONS)})")
    return ACTIVATIONS[activation]


def n_params(widths):
    d_in, h, d_out = widths
    return h * d_in + h + d_out * h + d_out


def unpack(widths, a):
    """Split a flat parameter vector into (A1, b1, A2, b2)."""
    d_in, h, d_out = widths
    a = np.asarray(a, dtype=float)
    i = 0
    A1 = a[i:i + h * d_in].reshape(h, d_in); i += h * d_in
    b1 = a[i:i + h]; i += h
    A2 = a[i:i + d_out * h].reshape(d_out, h); i += d_out * h
    b2 = a[i:i + d_out]
    return A1, b1, A2, b2


def pack(A1, b1, A2, b2):
    return np.concatenate([np.ravel(A1), np.ravel(b1), np.ravel(A2), np.ravel(b2)])


def nn_loss(widths=(1, 8, 1), p_loss=2.0, activation="tanh"):
    """f((x, y), a) = |y - (A2 s(A1 x + b1) + b2)|^p_loss with a = flat (A1, b1, A2, b2).

    Gradients in the state and in the parameters use backpropagation;
    the mixed and second derivatives fall back to finite differences.
    """
    d_in, h, d_out = (int(w) for w in widths)
    widths = (d_in, h, d_out)
    act, dact = _check_activation(activation)
    p = float(p_loss)
    if p <= 1.0:
        raise ValidationError("the loss exponent must exceed 1")

    def forward(X, a):
        A1, b1, A2, b2 = unpack(widths, a)
        x, y = X[:, :d_in], X[:, d_in:]
        z = x @ A1.T + b1
        s = act(z)
        e = y - (s @ A2.T + b2)
        return x, z, s, e, (A1, A2)

    def err_grad(e):
        n = np.linalg.norm(e, axis=1)
        if p == 2.0:
            return 2.0 * e
        scale = np.where(n > 0, p * n ** (p - 2.0), 0.0)
        return scale[:, None] * e

    def value(X, a):
        e = forward(X, a)[3]
        return np.linalg.norm(e, axis=1) ** p

    def grad_x(X, a):
        x, z, s, e, (A1, A2) = forward(X, a)
        ge = err_grad(e)
        back = (ge @ A2) * dact(z)
        return np.concatenate([-back @ A1, ge], axis=1)

    def grad_a(X, a):
        x, z, s, e, (A1, A2) = forward(X, a)
        ge = err_grad(e)
        d1 = (ge @ A2) * dact(z)
        gA1 = -(d1[:, :, None] * x[:, None, :]).reshape(len(X), -1)
        gA2 = -(ge[:, :, None] * s[:, None, :]).reshape(len(X), -1)
        return np.concatenate([gA1, -d1, gA2, -ge], axis=1)

    return LossModel(d_in + d_out, n_params(widths), value, grad_x, grad_a, p=p, name="nn",
                     params={"widths": list(widths), "p_loss": p, "activation": activation})


def nn_robustness(widths, params, data: DiscreteMeasure, norm: NormSpec, p_loss=2.0,
                  activation="tanh"):
    """(int ||grad_(x,y) f||^q dmu)^(1/q) at fixed network parameters."""
    loss = nn_loss(widths, p_loss, activation)
    if data.dim != loss.d:
        raise ValidationError(f"data dimension {data.dim} does not match the network ({loss.d})")
    if not norm.p > 1.0:
        from ..sensitivity import P_ONE_MESSAGE
        raise ValidationError(P_ONE_MESSAGE)
    g = loss.grad_x(data.atoms, np.asarray(params, dtype=float))
    return lq_norm(data, norm.norm(g), norm.q)


def train_nn(data: DiscreteMeasure, widths=(1, 8, 1), p_loss=2.0, activation="tanh", seed=0,
             weight_decay=1e-3, max_iter=5000):
    """Fit the network by BFGS from a seeded random start.

    A small ridge penalty keeps the weights bounded; without it a 200-point
    fit drifts towards sharp interpolants with very large input gradients.
    """
    loss = nn_loss(widths, p_loss, activation)
    rng = np.random.default_rng(seed)
    a0 = 0.5 * rng.standard_normal(loss.k)

    def fun(a):
        return loss.expected(data, a) + weight_decay * float(a @ a)

    def jac(a):
        return loss.expected_grad_a(data, a) + 2.0 * weight_decay * a

    res = minimize(fun, a0, jac=jac, method="BFGS", options={"gtol": 1e-9, "maxiter": max_iter})
    return res.x, loss
