"""Expected distance of a mapped state to a convex set under data perturbation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..measures import DiscreteMeasure, NormSpec
from ..problem import LossModel
from ..sensitivity import lq_norm


class Ball:
    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValidationError("ball radius must be positive")

    def project(self, Z):
        v = Z - self.center
        n = np.linalg.norm(v, axis=1)
        scale = np.where(n > self.radius, self.radius / np.where(n > 0, n, 1.0), 1.0)
        return self.center + v * scale[:, None]

    def interior(self, Z):
        return np.linalg.norm(Z - self.center, axis=1) < self.radius


class Box:
    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))

    def project(self, Z):
        return np.clip(Z, self.lower, self.upper)

    def interior(self, Z):
        return np.all((Z > self.lower) & (Z < self.upper), axis=1)


class HalfSpace:
    """{z : <normal, z> <= offset}."""

    def __init__(self, normal, offset):
        self.normal = np.atleast_1d(np.asarray(normal, dtype=float))
        self.offset = float(offset)
        self._nn = float(self.normal @ self.normal)

    def project(self, Z):
        viol = np.maximum(Z @ self.normal - self.offset, 0.0)
        return Z - (viol / self._nn)[:, None] * self.normal

    def interior(self, Z):
        return Z @ self.normal < self.offset


def convex_set(spec):
    kind = spec.get("kind")
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "box":
        return Box(spec["lower"], spec["upper"])
    if kind == "halfspace":
        return HalfSpace(spec["normal"], spec["offset"])
    raise ValidationError(f"unknown convex set {kind!r}; known: ball, box, halfspace")


class LinearMap:
    """G(x) = M x + b."""

    def __init__(self, M, b=None):
        self.M = np.atleast_2d(np.asarray(M, dtype=float))
        self.b = np.zeros(self.M.shape[0]) if b is None else np.atleast_1d(np.asarray(b, dtype=float))

    def __call__(self, X):
        return X @ self.M.T + self.b

    def jacobian(self, X):
        return np.broadcast_to(self.M, (X.shape[0],) + self.M.shape).copy()


class SmoothMap:
    """G given by batched callables ``value(X) -> (n, m)`` and ``jacobian(X) -> (n, m, d)``."""

    def __init__(self, value, jacobian):
        self._v, self._j = value, jacobian

    def __call__(self, X):
        return np.asarray(self._v(X), dtype=float)

    def jacobian(self, X):
        return np.asarray(self._j(X), dtype=float)


@dataclass
class UQResult:
    base: float
    slope: float
    first_order: float
    outside_mass: float


def _distance_parts(G, E, X):
    Z = G(X)
    P = E.project(Z)
    diff = Z - P
    dist = np.linalg.norm(diff, axis=1)
    unit = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
    grad = np.einsum("nm,nmd->nd", unit, G.jacobian(X))
    return dist, grad, Z


def uq_first_order(G, E, mu: DiscreteMeasure, norm: NormSpec, delta, boundary_tol=1e-12):
    """Base value int d(G(x), E) dmu, its first-order decrease rate, and base - slope delta."""
    if not norm.p > 1.0:
        from ..sensitivity import P_ONE_MESSAGE
        raise ValidationError(P_ONE_MESSAGE)
    dist, grad, Z = _distance_parts(G, E, mu.atoms)
    on_boundary = (dist <= boundary_tol) & ~E.interior(Z)
    if np.any(on_boundary):
        idx = np.nonzero(on_boundary)[0]
        raise ValidationError(f"atoms {idx.tolist()} are mapped onto the boundary of E, where "
                              "the distance is not differentiable")
    base = float(mu.integrate(dist))
    slope = lq_norm(mu, norm.norm(grad), norm.q)
    outside = float(np.sum(mu.weights[dist > 0]))
    return UQResult(base, slope, base - slope * delta, outside)


def distance_loss(G, E, d, sign=-1.0):
    """LossModel (no action) for sign * d(G(x), E), for oracle cross-checks."""

    def value(X, a):
        return sign * _distance_parts(G, E, X)[0]

    def grad_x(X, a):
        return sign * _distance_parts(G, E, X)[1]

    return LossModel(d, 0, value, grad_x, name="distance-to-set")
