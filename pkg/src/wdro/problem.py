"""Loss models f(x, a) with their derivative stack, linear constraints, and the delta = 0 solver."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, ValidationError
from .measures import DiscreteMeasure

log = logging.getLogger(__name__)

EVALUATORS = ("grad_x", "grad_a", "cross", "hess_a", "hess_x")
_EPS3 = np.finfo(float).eps ** (1.0 / 3.0)


def _step(v):
    return _EPS3 * np.maximum(1.0, np.abs(v))


def _fd_grad_x(value, X, a):
    n, d = X.shape
    out = np.empty((n, d))
    for j in range(d):
        h = _step(X[:, j])
        Xp, Xm = X.copy(), X.copy()
        Xp[:, j] += h
        Xm[:, j] -= h
        out[:, j] = (value(Xp, a) - value(Xm, a)) / (2.0 * h)
    return out


def _fd_grad_a(value, X, a):
    k = a.shape[0]
    out = np.empty((X.shape[0], k))
    for i in range(k):
        h = _step(a[i])
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        out[:, i] = (value(X, ap) - value(X, am)) / (2.0 * h)
    return out


def _fd_jac_x(vec_fn, X, a):
    """d/dx of a vector-valued evaluator: (n, m) -> (n, m, d)."""
    n, d = X.shape
    cols = []
    for j in range(d):
        h = _step(X[:, j])
        Xp, Xm = X.copy(), X.copy()
        Xp[:, j] += h
        Xm[:, j] -= h
        cols.append((vec_fn(Xp, a) - vec_fn(Xm, a)) / (2.0 * h)[:, None])
    return np.stack(cols, axis=-1)


def _fd_jac_a(vec_fn, X, a):
    k = a.shape[0]
    cols = []
    for i in range(k):
        h = _step(a[i])
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        cols.append((vec_fn(X, ap) - vec_fn(X, am)) / (2.0 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class LossModel:
    """Loss f(x, a) on R^d x R^k with batched evaluators.

    Every evaluator takes ``X`` of shape (n, d) and ``a`` of shape (k,):
    ``value`` -> (n,), ``grad_x`` -> (n, d), ``grad_a`` -> (n, k),
    ``cross`` -> (n, k, d) holding the mixed derivatives d^2 f / da_i dx_j,
    ``hess_a`` -> (n, k, k), ``hess_x`` -> (n, d, d). Missing evaluators
    fall back to central finite differences; ``flags`` records which.
    ``p`` is the exponent of the growth condition the loss is meant for.
    """

    d: int
    k: int
    value_fn: object
    grad_x_fn: object = None
    grad_a_fn: object = None
    cross_fn: object = None
    hess_a_fn: object = None
    hess_x_fn: object = None
    p: float = 2.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        flags = {}
        for ev in EVALUATORS:
            flags[ev] = "analytic" if getattr(self, ev + "_fn") is not None else "finite-difference"
        flags.update(self.flags)
        object.__setattr__(self, "flags", flags)

    # batched evaluators -------------------------------------------------
    def _prep(self, X, a):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.d == 1 else X[None, :]
        a = np.asarray(a, dtype=float).reshape(self.k)
        return X, a

    def value(self, X, a):
        X, a = self._prep(X, a)
        return np.asarray(self.value_fn(X, a), dtype=float)

    def grad_x(self, X, a):
        X, a = self._prep(X, a)
        if self.grad_x_fn is not None:
            return np.asarray(self.grad_x_fn(X, a), dtype=float)
        return _fd_grad_x(self.value_fn, X, a)

    def grad_a(self, X, a):
        X, a = self._prep(X, a)
        if self.k == 0:
            return np.zeros((X.shape[0], 0))
        if self.grad_a_fn is not None:
            return np.asarray(self.grad_a_fn(X, a), dtype=float)
        return _fd_grad_a(self.value_fn, X, a)

    def cross(self, X, a):
        X, a = self._prep(X, a)
        if self.k == 0:
            return np.zeros((X.shape[0], 0, self.d))
        if self.cross_fn is not None:
            return np.asarray(self.cross_fn(X, a), dtype=float)
        return _fd_jac_x(lambda Y, b: self.grad_a(Y, b), X, a)

    def hess_a(self, X, a):
        X, a = self._prep(X, a)
        if self.k == 0:
            return np.zeros((X.shape[0], 0, 0))
        if self.hess_a_fn is not None:
            return np.asarray(self.hess_a_fn(X, a), dtype=float)
        H = _fd_jac_a(lambda Y, b: self.grad_a(Y, b), X, a)
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def hess_x(self, X, a):
        X, a = self._prep(X, a)
        if self.hess_x_fn is not None:
            return np.asarray(self.hess_x_fn(X, a), dtype=float)
        H = _fd_jac_x(lambda Y, b: self.grad_x(Y, b), X, a)
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    # integrals against a measure ----------------------------------------
    def expected(self, mu: DiscreteMeasure, a):
        return float(mu.integrate(self.value(mu.atoms, a)))

    def expected_grad_a(self, mu: DiscreteMeasure, a):
        return mu.integrate(self.grad_a(mu.atoms, a))

    def expected_hess_a(self, mu: DiscreteMeasure, a):
        return mu.integrate(self.hess_a(mu.atoms, a))

    def scaled(self, c, shift=0.0):
        """The loss c * f + shift."""
        c = float(c)

        def wrap(fn, add=0.0):
            if fn is None:
                return None
            return lambda X, a: c * np.asarray(fn(X, a)) + add

        return LossModel(self.d, self.k, wrap(self.value_fn, shift), wrap(self.grad_x_fn),
                         wrap(self.grad_a_fn), wrap(self.cross_fn), wrap(self.hess_a_fn),
                         wrap(self.hess_x_fn), p=self.p, name=f"{c}*{self.name}+{shift}",
                         params=dict(self.params))

    def plus_linear_x(self, eta, grads_fn, values_fn, hess_fn=None):
        """The loss f(x, a) + sum_j eta_j Phi_j(x) for constraint functions Phi."""
        eta = np.asarray(eta, dtype=float)

        def value(X, a):
            return self.value(X, a) + values_fn(X) @ eta

        def grad_x(X, a):
            return self.grad_x(X, a) + np.einsum("nmd,m->nd", grads_fn(X), eta)

        def hess_x(X, a):
            return self.hess_x(X, a) + np.einsum("nmde,m->nde", hess_fn(X), eta)

        return LossModel(self.d, self.k, value, grad_x, self.grad_a, self.cross, self.hess_a,
                         None if hess_fn is None else hess_x, p=self.p, name=self.name + "+lagrangian", params=dict(self.params))

    def to_dict(self):
        return {"name": self.name, "d": self.d, "k": self.k, "p": self.p,
                "params": self.params, "flags": self.flags}


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """m scalar functions Phi_i(x): ``values(X)`` -> (n, m), ``grads(X)`` -> (n, m, d)."""

    m: int
    values_fn: object
    grads_fn: object = None
    hess_fn: object = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def values(self, X):
        return np.asarray(self.values_fn(np.asarray(X, dtype=float)), dtype=float).reshape(len(X), self.m)

    def grads(self, X):
        X = np.asarray(X, dtype=float)
        if self.grads_fn is not None:
            return np.asarray(self.grads_fn(X), dtype=float).reshape(X.shape[0], self.m, X.shape[1])
        return _fd_jac_x(lambda Y, _a: self.values(Y), X, np.zeros(0))

    def calibration_residual(self, mu: DiscreteMeasure):
        return mu.integrate(self.values(mu.atoms))


@dataclass(frozen=True)
class OptimizerCertificate:
    """An action together with its stationarity residual |grad_a V(delta, a)|."""

    action: np.ndarray
    residual: float
    source: str = "supplied"
    value: float | None = None
    delta: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "action", np.atleast_1d(np.asarray(self.action, dtype=float)))

    def to_dict(self):
        return {"action": self.action.tolist(), "residual": self.residual, "source": self.source,
                "value": self.value, "delta": self.delta}


def certificate(loss: LossModel, mu: DiscreteMeasure, a):
    """Wrap a user-supplied action, recording its stationarity residual."""
    a = np.asarray(a, dtype=float).reshape(loss.k)
    g = loss.expected_grad_a(mu, a)
    return OptimizerCertificate(a, float(np.linalg.norm(g)) if loss.k else 0.0, "supplied",
                                loss.expected(mu, a))


def solve_base_problem(loss: LossModel, mu: DiscreteMeasure, a0=None, tol=1e-8, max_iter=500):
    """Minimize a -> sum_i w_i f(x_i, a) by BFGS, then Newton-polish to |grad| <= tol."""
    k = loss.k
    if k == 0:
        return OptimizerCertificate(np.zeros(0), 0.0, "solved", loss.expected(mu, np.zeros(0)))
    a0 = np.zeros(k) if a0 is None else np.asarray(a0, dtype=float).reshape(k)

    def fun(a):
        return loss.expected(mu, a)

    def jac(a):
        return loss.expected_grad_a(mu, a)

    # a diverging run overflows inside the line search; it is caught by the checks below
    with np.errstate(over="ignore", invalid="ignore"):
        res = minimize(fun, a0, jac=jac, method="BFGS", options={"gtol": tol * 0.1, "maxiter": max_iter})
    a = res.x
    best_a, best_g = a, np.linalg.norm(jac(a))
    # Newton polish: BFGS stalls at ~1e-8 on badly scaled problems
    for _ in range(50):
        g = jac(a)
        gn = np.linalg.norm(g)
        if gn < best_g:
            best_a, best_g = a, gn
        if gn <= tol:
            break
        H = loss.expected_hess_a(mu, a)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or step @ g >= 0:
            break
        f0, t = fun(a), 1.0
        while t > 1e-10 and fun(a + t * step) > f0 + 1e-4 * t * (step @ g) + 1e-15 * abs(f0):
            t *= 0.5
        a = a + t * step
    g = jac(a)
    if np.linalg.norm(g) < best_g:
        best_a, best_g = a, np.linalg.norm(g)
    if best_g > tol:
        raise ConvergenceError(f"base problem did not reach stationarity {tol:g} "
                               f"(residual {best_g:.3g})", best=best_a, residual=best_g)
    return OptimizerCertificate(best_a, float(best_g), "solved", fun(best_a))


@dataclass(frozen=True)
class GrowthReport:
    """Heuristic check of |grad_x f| <= c (1 + |x|^(p-1)); not a certificate."""

    passed: bool
    constant_near: float
    constant_far: float
    ratio: float
    p: float
    message: str

    def to_dict(self):
        return dict(self.__dict__)


def check_growth(loss: LossModel, mu: DiscreteMeasure, a=None, p=None, factor=10.0,
                 n_probe=400, seed=0):
    """Compare the envelope constant on the atom hull against a 10x inflated hull.

    The fitted constant max |grad_x f| / (1 + |x|^(p-1)) is computed on
    points in the bounding box of the atoms and on the same box inflated by
    ``factor`` around its centre. A constant that grows by more than 2x is
    flagged: the gradient outgrows the (p-1)-power envelope.
    """
    p = loss.p if p is None else p
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float)
    rng = np.random.default_rng(seed)
    X = mu.atoms
    lo, hi = X.min(axis=0), X.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 0.5 * (1.0 + np.abs(centre)))

    def const(scale):
        pts = centre + (2.0 * rng.random((n_probe, loss.d)) - 1.0) * half * scale
        if scale == 1.0:
            pts = np.vstack([X, pts])
        g = np.linalg.norm(loss.grad_x(pts, a), axis=1)
        env = 1.0 + np.linalg.norm(pts, axis=1) ** (p - 1.0)
        return float(np.max(g / env))

    near, far = const(1.0), const(factor)
    ratio = far / near if near > 0 else (np.inf if far > 0 else 1.0)
    passed = bool(ratio <= 2.0)
    msg = ("gradient within the growth envelope" if passed else
           f"gradient grows faster than |x|^{p - 1:g}: envelope constant x{ratio:.3g} on the inflated hull")
    return GrowthReport(passed, near, far, float(ratio), float(p), msg)


def as_certificates(loss, mu, optimizers):
    """Normalize a certificate, an array, or a list of either to a list of certificates."""
    if optimizers is None:
        return [solve_base_problem(loss, mu)]
    if isinstance(optimizers, OptimizerCertificate):
        return [optimizers]
    if isinstance(optimizers, np.ndarray) and optimizers.ndim <= 1:
        return [certificate(loss, mu, optimizers)]
    out = []
    for o in optimizers:
        out.append(o if isinstance(o, OptimizerCertificate) else certificate(loss, mu, o))
    if not out and loss.k == 0:
        out = [certificate(loss, mu, np.zeros(0))]
    if not out:
        raise ValidationError("no optimizers supplied")
    return out
