"""Discrete measures, l^s seminorms on coordinate subsets, and exact W_p."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import NumericalError, ValidationError

PRUNE_BELOW = 1e-15


class ZeroComponentWarning(RuntimeWarning):
    """h-map for s=1 evaluated at a point with a zero active component."""


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure on R^d.

    ``atoms`` has shape (n, d) and ``weights`` shape (n,). Weights below
    1e-15 are dropped; the rest are renormalized after checking they sum
    to one.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise ValidationError("empty measure")
        if atoms.shape[0] != weights.shape[0]:
            raise ValidationError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if not np.all(np.isfinite(atoms)):
            raise ValidationError("atom coordinates must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValidationError("weights must be finite and nonnegative")
        total = weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {total!r}, not 1")
        keep = weights >= PRUNE_BELOW
        if not np.any(keep):
            raise ValidationError("empty measure")
        atoms, weights = atoms[keep], weights[keep]
        weights = weights / weights.sum()
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def n(self):
        return self.atoms.shape[0]

    @property
    def dim(self):
        return self.atoms.shape[1]

    def integrate(self, values):
        """Weighted sum over atoms along the first axis."""
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def mean(self):
        return self.integrate(self.atoms)

    def to_dict(self):
        return {"atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, obj):
        if "samples" in obj:
            return make_empirical(obj["samples"])
        return cls(np.asarray(obj["atoms"], dtype=float), np.asarray(obj["weights"], dtype=float))

    def to_json(self, path):
        from ._numerics import write_json
        write_json(path, self.to_dict())

    def to_csv(self, path):
        from ._numerics import write_csv
        header = [f"x{j + 1}" for j in range(self.dim)] + ["weight"]
        rows = [list(a) + [w] for a, w in zip(self.atoms, self.weights)]
        write_csv(path, header, rows)


def make_empirical(samples):
    """Uniform measure on the given samples (duplicates retained)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise ValidationError("empty measure")
    if arr.ndim == 1:
        arr = arr[:, None]
    n = arr.shape[0]
    return DiscreteMeasure(arr, np.full(n, 1.0 / n))


def load_measure(path):
    """Read a measure from ``.json`` or ``.csv`` (last column = weight)."""
    path = str(path)
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return DiscreteMeasure.from_dict(json.load(fh))
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ValidationError(f"non-numeric row in {path}: {row}")
                continue  # header
    if not rows:
        raise ValidationError("empty measure")
    arr = np.asarray(rows, dtype=float)
    return DiscreteMeasure(arr[:, :-1], arr[:, -1])


@dataclass(frozen=True)
class NormSpec:
    """l^s seminorm on the ``active`` coordinates (0-based; None = all).

    ``p`` is the Wasserstein order. The transport cost is the dual norm
    raised to the power p; the dual norm is l^r on the active coordinates
    and +inf on vectors with a nonzero inactive coordinate.
    """

    s: float = 2.0
    active: tuple | None = None
    p: float = 2.0

    def __post_init__(self):
        if not (self.s >= 1.0) or math.isnan(self.s):
            raise ValidationError(f"norm exponent s must be >= 1, got {self.s}")
        if not (self.p > 0) or math.isnan(self.p):
            raise ValidationError(f"Wasserstein order must be positive, got {self.p}")
        if self.active is not None:
            act = tuple(sorted(int(i) for i in self.active))
            if len(act) == 0 or len(set(act)) != len(act) or act[0] < 0:
                raise ValidationError(f"bad active coordinate set {self.active}")
            object.__setattr__(self, "active", act)

    @property
    def r(self):
        """Dual exponent, 1/r + 1/s = 1."""
        if self.s == 1.0:
            return math.inf
        if math.isinf(self.s):
            return 1.0
        return self.s / (self.s - 1.0)

    @property
    def q(self):
        """Conjugate of the Wasserstein order p."""
        if self.p <= 1.0:
            return math.inf
        return self.p / (self.p - 1.0)

    def mask(self, d):
        m = np.zeros(d, dtype=bool)
        if self.active is None:
            m[:] = True
        else:
            if self.active[-1] >= d:
                raise ValidationError(f"active coordinate {self.active[-1]} out of range for d={d}")
            m[list(self.active)] = True
        return m

    def norm(self, x):
        """Primal seminorm along the last axis."""
        x = np.asarray(x, dtype=float)
        return _lnorm(x[..., self.mask(x.shape[-1])], self.s)

    def dual(self, y):
        """Dual norm along the last axis (+inf off the active subspace)."""
        y = np.asarray(y, dtype=float)
        m = self.mask(y.shape[-1])
        val = _lnorm(y[..., m], self.r)
        if not np.all(m):
            off = np.any(y[..., ~m] != 0.0, axis=-1)
            val = np.where(off, np.inf, val)
        return val

    def cost(self, z):
        """Transport cost ||z||_*^p along the last axis."""
        return self.dual(z) ** self.p

    def h(self, x):
        return h_map(self, x)

    def to_dict(self):
        return {"s": self.s, "active": list(self.active) if self.active is not None else None,
                "p": self.p}


def _lnorm(x, s):
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    ax = np.abs(x)
    if math.isinf(s):
        return ax.max(axis=-1)
    if s == 1.0:
        return ax.sum(axis=-1)
    if s == 2.0:
        return np.sqrt(np.sum(ax * ax, axis=-1))
    scale = ax.max(axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return (safe[..., 0] * np.sum((ax / safe) ** s, axis=-1) ** (1.0 / s)) * (scale[..., 0] > 0)


def dual_norm(norm: NormSpec, y):
    return norm.dual(y)


def h_map(norm: NormSpec, x):
    """Unit dual-norm vector h(x) with <x, h(x)> = ||x||; zero where ||x|| = 0.

    Works along the last axis. For s = 1 the map is sign(x) on active
    coordinates; a zero active component triggers ZeroComponentWarning.
    """
    x = np.asarray(x, dtype=float)
    m = norm.mask(x.shape[-1])
    out = np.zeros_like(x)
    xa = x[..., m]
    if xa.shape[-1]:
        # rescale so that tiny or huge inputs do not lose precision; h is 0-homogeneous
        big = np.max(np.abs(xa), axis=-1, keepdims=True)
        xa = xa / np.where(big > 0, big, 1.0)
    nrm = _lnorm(xa, norm.s)
    nz = nrm > 0
    s = norm.s
    if s == 1.0:
        ha = np.sign(xa)
        if np.any((xa == 0.0) & nz[..., None]):
            warnings.warn("h-map with s=1 at a point with a zero active component; "
                          "using sign(0)=0", ZeroComponentWarning, stacklevel=2)
    else:
        safe = np.where(nz, nrm, 1.0)[..., None]
        ha = np.sign(xa) * (np.abs(xa) / safe) ** (s - 1.0)
    ha = np.where(nz[..., None], ha, 0.0)
    out[..., m] = ha
    return out


def wasserstein_distance(mu: DiscreteMeasure, nu: DiscreteMeasure, norm: NormSpec):
    """Exact W_p via the transportation linear program.

    Pairs with infinite cost are excluded from the coupling; +inf is
    returned when no finite-cost coupling exists.
    """
    if mu.dim != nu.dim:
        raise ValidationError("measures live in different dimensions")
    p = norm.p
    diff = mu.atoms[:, None, :] - nu.atoms[None, :, :]
    cost = norm.cost(diff)
    n, m = cost.shape
    finite = np.isfinite(cost)
    if (n == m and np.allclose(mu.weights, 1.0 / n, rtol=0, atol=1e-15)
            and np.allclose(nu.weights, 1.0 / m, rtol=0, atol=1e-15)):
        # uniform measures of equal size: an optimal coupling is a permutation
        big = np.where(finite, cost, np.inf)
        try:
            rows, cols = linear_sum_assignment(big)
        except ValueError:
            return math.inf
        total = float(np.mean(big[rows, cols]))
        return total ** (1.0 / p)
    ii, jj = np.nonzero(finite)
    c = cost[ii, jj]
    nv = len(c)
    if nv == 0:
        return math.inf
    cols = np.arange(nv)
    a_eq = sparse.coo_matrix((np.ones(2 * nv), (np.concatenate([ii, n + jj]),
                                                np.concatenate([cols, cols]))),
                             shape=(n + m, nv)).tocsr()
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 2:
        return math.inf
    if not res.success:
        raise NumericalError(f"transport LP failed: {res.message}")
    plan = np.clip(res.x, 0.0, None)
    total = float(plan @ c)
    return max(total, 0.0) ** (1.0 / p)


@dataclass(frozen=True)
class SupportSpec:
    """Closed convex support set S: all of R^d, a box, or {x : A x <= b}."""

    kind: str = "all"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    _norms: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("all", "box", "halfspaces"):
            raise ValidationError(f"unknown support kind {self.kind!r}")
        if self.kind == "box":
            lo = _frozen(np.atleast_1d(self.lower))
            hi = _frozen(np.atleast_1d(self.upper))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValidationError("box needs lower <= upper of equal shape")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        if self.kind == "halfspaces":
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            b = np.atleast_1d(np.asarray(self.b, dtype=float))
            if A.shape[0] != b.shape[0]:
                raise ValidationError("half-space matrix and offsets disagree")
            norms = np.linalg.norm(A, axis=1)
            if np.any(norms == 0):
                raise ValidationError("zero half-space normal")
            object.__setattr__(self, "A", _frozen(A))
            object.__setattr__(self, "b", _frozen(b))
            object.__setattr__(self, "_norms", _frozen(norms))

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def halfspaces(cls, A, b):
        return cls("halfspaces", A=A, b=b)

    @classmethod
    def from_dict(cls, obj):
        if obj is None:
            return cls()
        kind = obj.get("kind", "all")
        if kind == "box":
            lo = [(-math.inf if v is None else v) for v in obj["lower"]]
            hi = [(math.inf if v is None else v) for v in obj["upper"]]
            return cls.box(lo, hi)
        if kind == "halfspaces":
            return cls.halfspaces(obj["A"], obj["b"])
        return cls(kind)

    @property
    def is_all(self):
        return self.kind == "all"

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        if self.kind == "all":
            return np.ones(x.shape[:-1], dtype=bool)
        if self.kind == "box":
            return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)
        return np.all(x @ self.A.T <= self.b + tol, axis=-1)

    def interior(self, x):
        return self.boundary_distance(x) > 0

    def boundary_distance(self, x):
        """Euclidean distance from points of S to the complement of S."""
        x = np.asarray(x, dtype=float)
        if self.kind == "all":
            return np.full(x.shape[:-1], np.inf)
        if self.kind == "box":
            gaps = np.minimum(x - self.lower, self.upper - x)
            return gaps.min(axis=-1)
        return ((self.b - x @ self.A.T) / self._norms).min(axis=-1)

    def project(self, x, max_iter=2000, tol=1e-13):
        """Euclidean projection onto S along the last axis."""
        x = np.asarray(x, dtype=float)
        if self.kind == "all":
            return x
        if self.kind == "box":
            return np.clip(x, self.lower, self.upper)
        A, b = self.A, self.b
        if A.shape[0] == 1:
            viol = x @ A[0] - b[0]
            step = np.maximum(viol, 0.0) / (self._norms[0] ** 2)
            return x - step[..., None] * A[0]
        # Dykstra's alternating projections over the half-spaces
        y = x.copy()
        incs = np.zeros((A.shape[0],) + x.shape)
        for _ in range(max_iter):
            prev = y.copy()
            for j in range(A.shape[0]):
                z = y + incs[j]
                viol = z @ A[j] - b[j]
                step = np.maximum(viol, 0.0) / (self._norms[j] ** 2)
                ynew = z - step[..., None] * A[j]
                incs[j] = z - ynew
                y = ynew
            if np.max(np.abs(y - prev)) <= tol * (1.0 + np.max(np.abs(y))):
                break
        return y

    def to_dict(self):
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if self.kind == "halfspaces":
            return {"kind": "halfspaces", "A": self.A.tolist(), "b": self.b.tolist()}
        return {"kind": "all"}
