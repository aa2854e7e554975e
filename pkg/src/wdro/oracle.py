"""Brute-force evaluation of Wasserstein-robust values on discrete measures.

V(delta, a) = sup over nu with W_p(mu, nu) <= delta of int f(x, a) dnu is
computed through its dual

    inf_{lam >= 0}  lam delta^p + sum_i w_i sup_{y in S} [f(y, a) - lam ||y - x_i||_*^p],

with the inner suprema solved per atom by multi-start damped Newton ascent
and the outer one-dimensional problem by Brent's method (golden section with
parabolic steps) on log(lam).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from ._numerics import neville_at_zero
from .errors import ConvergenceError, NumericalError, RadiusOrderMismatch, ValidationError
from .measures import DiscreteMeasure, NormSpec, SupportSpec, h_map
from .problem import LossModel, OptimizerCertificate, solve_base_problem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleConfig:
    n_starts: int = 8
    grid_span: float = 5.0
    seed: int = 0
    tol: float = 1e-7
    lam_xtol: float = 1e-10
    newton_xtol: float = 1e-13
    max_newton: int = 100
    max_halvings: int = 40
    check_growth: bool = True


@dataclass
class DualEvalResult:
    value: float
    lambda_star: float
    displaced_atoms: np.ndarray
    worst_case: DiscreteMeasure
    primal_value: float
    gap: float
    transport_cost: float
    delta: float
    action: np.ndarray
    seed: int
    n_dual_evals: int = 0
    info: dict = field(default_factory=dict)

    def to_dict(self):
        return {"value": self.value, "lambda_star": self.lambda_star,
                "displaced_atoms": self.displaced_atoms.tolist(),
                "worst_case": self.worst_case.to_dict(), "primal_value": self.primal_value,
                "gap": self.gap, "transport_cost": self.transport_cost, "delta": self.delta,
                "action": self.action.tolist(), "seed": self.seed,
                "n_dual_evals": self.n_dual_evals}


# ---------------------------------------------------------------- transport cost


def _cost_derivs(z, p, r):
    """c(z) = ||z||_r^p with gradient and Hessian, batched over rows of z."""
    B, m = z.shape
    az = np.abs(z)
    if r == 2.0:
        N = np.sqrt(np.sum(z * z, axis=1))
    else:
        N = np.sum(az ** r, axis=1) ** (1.0 / r)
    pos = N > 0
    Ns = np.where(pos, N, 1.0)
    ratio = az / Ns[:, None]
    u = np.sign(z) * ratio ** (r - 1.0)
    c = N ** p
    grad = (p * Ns ** (p - 1.0))[:, None] * u * pos[:, None]
    if r == 2.0:
        diag = np.ones_like(z)
    else:
        diag = np.maximum(ratio, 1e-6) ** (r - 2.0)
    uu = u[:, :, None] * u[:, None, :]
    hess = (p * Ns ** (p - 2.0))[:, None, None] * (
        (p - 1.0) * uu + (r - 1.0) * (diag[:, :, None] * np.eye(m) - uu))
    hess = np.where(pos[:, None, None], hess, 0.0)
    if p == 2.0 and r == 2.0:
        hess[~pos] = 2.0 * np.eye(m)
    return c, grad, hess


# ---------------------------------------------------------------- dual solver


class _DualSolver:
    """Dual evaluation for fixed (loss, mu, norm, delta, support).

    Keeps warm-start positions between calls, so an instance is private to
    one caller (robust_optimize) and not shareable mid-run.
    """

    def __init__(self, loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta,
                 support: SupportSpec | None, config: OracleConfig):
        if delta < 0 or not np.isfinite(delta):
            raise ValidationError("radius delta must be a finite number >= 0")
        if mu.dim != loss.d:
            raise ValidationError(f"measure dimension {mu.dim} != loss dimension {loss.d}")
        if norm.s == 1.0:
            raise ValidationError("the oracle needs s > 1 (finite dual exponent)")
        self.loss, self.mu, self.norm, self.delta = loss, mu, norm, float(delta)
        self.support = support if support is not None else SupportSpec()
        self.cfg = config
        self._growth_checked = False
        self.p, self.r = float(norm.p), float(norm.r)
        self.mask = norm.mask(loss.d)
        self.act = np.nonzero(self.mask)[0]
        if not self.support.is_all:
            if not np.all(self.support.contains(mu.atoms, tol=1e-12)):
                raise ValidationError("atoms of mu lie outside the support S")
            if not np.all(self.mask) and self.support.kind == "halfspaces":
                raise ValidationError("half-space supports need a full-coordinate norm")
        self.rng = np.random.default_rng(config.seed)
        self.n, self.d = mu.n, loss.d
        m = len(self.act)
        self.m = m
        ns = max(int(config.n_starts), 3)
        self.ns = ns
        # unit directions (dual-norm 1) for the grid starts in the active subspace
        if m == 1:
            base = np.array([[1.0], [-1.0]])
        else:
            base = self.rng.standard_normal((max(ns - 2, 1), m))
        self.rand_dirs = base / np.asarray(norm_dual_rows(base, self.r))[:, None]
        self.warm = None
        self.n_evals = 0
        self.spread = float(np.max(np.ptp(mu.atoms[:, self.mask], axis=0))) if mu.n > 1 else 0.0

    # -- helpers
    def _embed(self, X, Z):
        Y = X.copy()
        Y[:, self.act] += Z
        return Y

    def _project(self, Y, X):
        if self.support.is_all:
            return Y
        Y = self.support.project(Y)
        if self.m < self.d:
            inact = ~self.mask
            Y[:, inact] = X[:, inact]
        return Y

    def _phi(self, Y, X, a, lam):
        f = self.loss.value(Y, a)
        c = np.sum(np.abs(Y[:, self.act] - X[:, self.act]) ** self.r, axis=1) ** (self.p / self.r) \
            if self.r != 2.0 else np.sum((Y[:, self.act] - X[:, self.act]) ** 2, axis=1) ** (self.p / 2.0)
        return f - lam * c, f, c

    def _starts(self, a, lam):
        X = self.mu.atoms
        n, m, ns = self.n, self.m, self.ns
        p = self.p
        G = self.loss.grad_x(X, a)[:, self.act]
        gnorm = np.linalg.norm(G, axis=1) if self.norm.s == 2.0 else _lnorm_rows(G, self.norm.s)
        L = float(np.max(gnorm)) if n else 0.0
        if p > 1.0:
            rho = (max(L, 1e-12) / (p * lam)) ** (1.0 / (p - 1.0))
            t = (gnorm / (p * lam)) ** (1.0 / (p - 1.0))
        else:
            rho = 1.0 + self.spread
            t = np.full(n, rho)
        # a point mass may move by delta, so the grid never shrinks below that;
        # this matters where grad_x f vanishes on the atoms
        rho = max(rho, self.delta)
        rho = min(rho, 1e6 * (1.0 + self.spread + float(np.max(np.abs(X)))))
        t = np.minimum(t, rho)
        H = _h_rows(G, self.norm.s)
        gbar = self.mu.integrate(G)
        hbar = _h_rows(gbar[None, :], self.norm.s)[0]
        if not np.any(hbar):
            hbar = self.rand_dirs[0]
        Z = np.zeros((n, ns, m))
        Z[:, 1, :] = t[:, None] * H
        span = self.cfg.grid_span
        if m == 1:
            radii = np.linspace(1.0, span, max((ns - 2 + 1) // 2, 1))
            offs = []
            for rad in radii:
                offs += [rad, -rad]
            offs = np.array(offs[: ns - 2]) * rho
            Z[:, 2:, 0] = offs[None, :]
        else:
            dirs = [hbar, -hbar, hbar]
            rads = [1.0, 1.0, 0.5 * span]
            j = 0
            while len(dirs) < ns - 2:
                dirs.append(self.rand_dirs[j % len(self.rand_dirs)])
                rads.append(1.0 + (span - 1.0) * ((j % 3) / 2.0))
                j += 1
            dirs = np.array(dirs[: ns - 2])
            rads = np.array(rads[: ns - 2]) * rho
            Z[:, 2:, :] = (rads[:, None] * dirs)[None, :, :]
        k = min(3, ns - 2)
        Z[:, ns - k:, :] = self._radial_scan(a, lam, H, hbar, k)
        Xr = np.repeat(X, ns, axis=0)
        Y = self._embed(Xr, Z.reshape(n * ns, m))
        Y = self._project(Y, Xr)
        if self.warm is not None:
            Y.reshape(n, ns, self.d)[:, 0, :] = self.warm
        return Y, Xr

    def _radial_scan(self, a, lam, H, hbar, k=2):
        """Best displacement per atom on a geometric radius grid along a few directions.

        The gradient at the atoms can badly understate the slope further out
        (a call payoff far out of the money), so local starts scaled by it
        may never reach the maximizer.
        """
        X = self.mu.atoms
        n, m = self.n, self.m
        if m == 1:
            dirs = [np.ones((n, 1)), -np.ones((n, 1))]
        else:
            dirs = [H, -H, np.broadcast_to(hbar, (n, m)), np.broadcast_to(-hbar, (n, m))]
        if 1 < m <= 3:
            for j in range(m):
                e = np.zeros(m)
                e[j] = 1.0
                dirs += [np.broadcast_to(e, (n, m)), np.broadcast_to(-e, (n, m))]
        D = np.stack(dirs, axis=1)
        ok = np.any(D != 0.0, axis=2)
        base = max(self.delta, 1e-3 * (1.0 + self.spread))
        top = 1e6 * (1.0 + self.spread + float(np.max(np.abs(X))))
        radii = base * 2.0 ** (np.arange(-32, 161) / 4.0)
        radii = radii[radii <= top]
        nd, nr = D.shape[1], len(radii)
        Z = D[:, :, None, :] * radii[None, None, :, None]
        Xr = np.repeat(X, nd * nr, axis=0)
        Y = self._project(self._embed(Xr, Z.reshape(-1, m)), Xr)
        with np.errstate(all="ignore"):
            phi = self._phi(Y, Xr, a, lam)[0].reshape(n, nd, nr)
        phi = np.where(ok[:, :, None] & np.isfinite(phi), phi, -np.inf)
        # keep only local maxima along each ray; the k best seed k starts,
        # so a narrow far peak is not lost to a grid point near the atom
        pad = np.pad(phi, ((0, 0), (0, 0), (1, 1)), constant_values=-np.inf)
        peak = (phi >= pad[:, :, :-2]) & (phi >= pad[:, :, 2:])
        # a peak at the innermost radius is the atom's own basin, already a start
        peak[:, :, 0] = False
        flat = np.where(peak, phi, -np.inf).reshape(n, -1)
        order = np.argsort(-flat, axis=1)[:, :k]
        rows = np.arange(n)[:, None]
        Zb = (Y.reshape(n, nd * nr, self.d)[rows, order] - X[:, None, :])[:, :, self.act]
        return np.where(np.isfinite(flat[rows, order])[:, :, None], Zb, 0.0)

    def _ascend(self, Y, X, a, lam):
        """Damped modified-Newton ascent of phi from every start (batched)."""
        cfg, p, r = self.cfg, self.p, self.r
        act = self.act
        B = Y.shape[0]
        phi, f, c = self._phi(Y, X, a, lam)
        live = np.ones(B, dtype=bool)
        bound = 1e8 * (1.0 + self.spread + float(np.max(np.abs(X))))
        fscale = 1e12 * (1.0 + float(np.max(np.abs(f))))
        unbounded = np.zeros(B, dtype=bool)
        for _ in range(cfg.max_newton):
            idx = np.nonzero(live)[0]
            if idx.size == 0:
                break
            Yi, Xi = Y[idx], X[idx]
            Zi = Yi[:, act] - Xi[:, act]
            _, cg, ch = _cost_derivs(Zi, p, r)
            g = self.loss.grad_x(Yi, a)[:, act] - lam * cg
            Hf = self.loss.hess_x(Yi, a)[:, act][:, :, act]
            Hm = Hf - lam * ch
            Hm = 0.5 * (Hm + np.swapaxes(Hm, 1, 2))
            if self.m == 1:
                e = Hm[:, 0, 0]
                emod = -np.maximum(np.abs(e), 1e-8 * (1.0 + np.abs(e) + lam))
                dirn = -(g[:, 0] / emod)[:, None]
            else:
                evals, evecs = np.linalg.eigh(Hm)
                amax = np.max(np.abs(evals), axis=1, keepdims=True)
                emod = -np.maximum(np.abs(evals), 1e-8 * (1.0 + amax + lam))
                coef = np.einsum("bji,bj->bi", evecs, g) / emod
                dirn = -np.einsum("bij,bj->bi", evecs, coef)
            tstep = np.ones(idx.size)
            accepted = np.zeros(idx.size, dtype=bool)
            newY = Yi.copy()
            newphi = phi[idx].copy()
            pend = np.arange(idx.size)
            for _h in range(cfg.max_halvings):
                if pend.size == 0:
                    break
                trial = Yi[pend].copy()
                trial[:, act] += tstep[pend, None] * dirn[pend]
                trial = self._project(trial, Xi[pend])
                tphi, _, _ = self._phi(trial, Xi[pend], a, lam)
                gain = np.einsum("bi,bi->b", g[pend], trial[:, act] - Yi[pend][:, act])
                ok = tphi >= phi[idx[pend]] + 1e-4 * np.maximum(gain, 0.0) \
                    - 1e-15 * (1.0 + np.abs(phi[idx[pend]]))
                ok &= np.isfinite(tphi)
                acc = pend[ok]
                newY[acc] = trial[ok]
                newphi[acc] = tphi[ok]
                accepted[acc] = True
                tstep[pend[~ok]] *= 0.5
                pend = pend[~ok]
            move = np.max(np.abs(newY - Yi), axis=1)
            scale = 1.0 + np.max(np.abs(Yi), axis=1)
            conv = (~accepted) | (move <= cfg.newton_xtol * scale) | \
                (np.abs(newphi - phi[idx]) <= 1e-16 * (1.0 + np.abs(phi[idx])))
            Y[idx] = newY
            phi[idx] = newphi
            far = (np.max(np.abs(newY - Xi), axis=1) > bound) | (newphi > fscale)
            unbounded[idx[far]] = True
            live[idx[conv | far]] = False
        phi, f, c = self._phi(Y, X, a, lam)
        return Y, phi, f, c, unbounded

    def inner(self, a, lam):
        """Per-atom best displaced point, phi, f, cost at multiplier lam."""
        self.n_evals += 1
        Y0, Xr = self._starts(a, lam)
        Y, phi, f, c, unb = self._ascend(Y0, Xr, a, lam)
        n, ns = self.n, self.ns
        if np.any(unb):
            return None
        phi = phi.reshape(n, ns)
        j = np.argmax(phi, axis=1)
        rows = np.arange(n)
        Yb = Y.reshape(n, ns, self.d)[rows, j]
        return Yb, phi[rows, j], f.reshape(n, ns)[rows, j], c.reshape(n, ns)[rows, j]

    def _fill_flat(self, a, lam, Yb, phib, cb, dp):
        """Spend the unused budget along directions where phi(., lam) is flat.

        When phi has a flat ray at lam* (e.g. f = x^2 at lam = 1 for p = 2),
        every point of the ray is a maximizer and the budget can be met with
        a single displaced point per atom. Tries one atom carrying the whole
        deficit, then an even split; returns None if neither keeps phi maximal.
        """
        X, w = self.mu.atoms, self.mu.weights
        p = self.p
        deficit = dp - float(w @ cb)
        tol = 1e-9 * (1.0 + np.abs(phib))
        G = self.loss.grad_x(X, a)[:, self.act]
        dirs = [d for d in self.rand_dirs] + [-d for d in self.rand_dirs]
        dirs += list(np.eye(self.m)) + list(-np.eye(self.m))

        def try_atom(i, target_cost):
            z0 = Yb[i, self.act] - X[i, self.act]
            cands = list(dirs)
            hg = _h_rows(G[i:i + 1], self.norm.s)[0]
            if np.any(hg):
                cands.insert(0, hg)
            if np.any(z0):
                cands.insert(0, z0 / float(norm_dual_rows(z0[None, :], self.r)[0]))
            s_len = target_cost ** (1.0 / p)
            for u in cands:
                y = X[i].copy()
                y[self.act] += s_len * u
                y = self._project(y[None, :], X[i:i + 1])[0]
                ph, _, c = self._phi(y[None, :], X[i:i + 1], a, lam)
                if ph[0] >= phib[i] - tol[i] and abs(c[0] - target_cost) <= 1e-9 * target_cost:
                    return y
            return None

        for i in np.argsort(-w):
            y = try_atom(i, cb[i] + deficit / w[i])
            if y is not None:
                out = Yb.copy()
                out[i] = y
                return out
        out = Yb.copy()
        for i in range(self.n):
            y = try_atom(i, cb[i] + deficit)
            if y is None:
                return None
            out[i] = y
        return out

    def _check_growth(self, a):
        # the local inner search cannot see a supremum that is infinite for
        # every multiplier, so probe the gradient envelope once per solver
        self._growth_checked = True
        if self.support.kind == "box" and np.all(np.isfinite(self.support.lower)) \
                and np.all(np.isfinite(self.support.upper)):
            return
        X = self.mu.atoms
        centre = X.mean(axis=0)
        R = 10.0 * (1.0 + float(np.max(np.abs(X))))
        rng = np.random.default_rng(self.cfg.seed)
        U = np.zeros((200 + 2 * len(self.act), self.d))
        U[:200, self.act] = rng.standard_normal((200, len(self.act)))
        for j, c in enumerate(self.act):
            U[200 + 2 * j, c], U[201 + 2 * j, c] = 1.0, -1.0
        U /= np.linalg.norm(U, axis=1, keepdims=True)

        def top(radius):
            with np.errstate(all="ignore"):
                g = self.loss.grad_x(centre + radius * U, a)[:, self.act]
            g = np.linalg.norm(g, axis=1)
            return float(np.max(np.where(np.isfinite(g), g, np.inf)))

        near, far = top(R), top(10.0 * R)
        if far <= 0.0:
            return
        slope = math.log10(far / near) if near > 0 else math.inf
        if slope > self.p - 1.0 + 0.25:
            raise RadiusOrderMismatch(
                f"radius-order mismatch: the state gradient grows like |x|^{slope:.2g}, faster than "
                f"|x|^{self.p - 1.0:g}; the robust value is infinite for W_{self.p:g} balls")

    def evaluate(self, a, lam_hint=None):
        a = np.asarray(a, dtype=float).reshape(self.loss.k)
        mu, delta, p = self.mu, self.delta, self.p
        X = mu.atoms
        w = mu.weights
        if delta == 0.0:
            val = float(w @ self.loss.value(X, a))
            return DualEvalResult(val, math.inf, X.copy(), mu, val, 0.0, 0.0, 0.0, a,
                                  self.cfg.seed, 0)
        if self.cfg.check_growth and not self._growth_checked:
            self._check_growth(a)
        dp = delta ** p
        cache = {}

        def solve(lam):
            key = float(lam)
            if key not in cache:
                res = self.inner(a, lam)
                if res is None:
                    cache[key] = (math.inf, None)
                else:
                    Yb, phib, fb, cb = res
                    cache[key] = (lam * dp + float(w @ phib), res)
            return cache[key]

        def G(u):
            return solve(math.exp(u))[0]

        def cost_at(lam):
            val, res = solve(lam)
            return math.inf if res is None else float(w @ res[3])

        G0 = self.loss.grad_x(X, a)[:, self.act]
        L = float(np.max(_lnorm_rows(G0, self.norm.s)))
        if lam_hint is not None and np.isfinite(lam_hint) and lam_hint > 0:
            lam0 = float(lam_hint)
            grow = 1.5
        else:
            lam0 = L / (p * delta ** (p - 1.0)) if L > 0 else 1.0
            lam0 = max(lam0, 1e-8)
            grow = 2.0
        # grow the bracket until the dual derivative dp - cost(lam) changes sign
        lam_floor = lam0 * 1e-14
        at_zero = False
        lam = lam0
        if cost_at(lam) > dp:
            lam_lo = lam
            for _ in range(80):
                lam *= grow
                grow = min(grow * 1.5, 10.0)
                if cost_at(lam) <= dp:
                    break
                lam_lo = lam
            else:
                raise RadiusOrderMismatch(
                    "radius-order mismatch: the inner supremum stays unbounded or the transport "
                    "budget is exceeded for every multiplier (loss grows at least like |x|^p)")
            lam_hi = lam
        else:
            lam_hi = lam
            while True:
                lam /= grow
                grow = min(grow * 1.5, 10.0)
                if cost_at(lam) >= dp:
                    break
                lam_hi = lam
                if lam < lam_floor:
                    at_zero = True
                    break
            lam_lo = lam
        if at_zero:
            lam_star = lam_lo
        else:
            # G is +inf where the inner supremum is unbounded, which makes the
            # parabolic interpolation step undefined; the golden step takes over
            with np.errstate(invalid="ignore"):
                res = minimize_scalar(G, bounds=(math.log(lam_lo), math.log(lam_hi)),
                                      method="bounded",
                                      options={"xatol": self.cfg.lam_xtol, "maxiter": 500})
            cand = [(G(u), u) for u in (res.x, math.log(lam_lo), math.log(lam_hi))]
            lam_star = math.exp(min(cand)[1])
        value, best = solve(lam_star)
        if best is None:
            raise NumericalError("dual objective infinite at its minimizer")
        Yb, phib, fb, cb = best
        self.warm = Yb.copy()
        cost = float(w @ cb)
        if abs(cost - dp) <= 1e-9 * dp or (at_zero and cost <= dp):
            atoms, weights = Yb, w
            primal = float(w @ fb)
            tcost = cost
        else:
            # mix the maximizers on either side of lam* so the budget is met exactly
            eps = 1e-7
            lo_res = hi_res = None
            for _ in range(12):
                lo_l, hi_l = lam_star * (1.0 - eps), lam_star * (1.0 + eps)
                c_lo, c_hi = cost_at(lo_l), cost_at(hi_l)
                if c_lo >= dp >= c_hi:
                    lo_res, hi_res = solve(lo_l)[1], solve(hi_l)[1]
                    break
                eps *= 4.0
            flat = None
            if lo_res is None and cost < dp:
                flat = self._fill_flat(a, lam_star, Yb, phib, cb, dp)
            if flat is not None:
                atoms, weights = flat, w
                primal = float(w @ self.loss.value(atoms, a))
                tcost = float(w @ self.norm.cost(atoms - X))
                Yb = flat
            elif lo_res is None:
                # fall back to the feasible side
                if cost <= dp:
                    atoms, weights, primal, tcost = Yb, w, float(w @ fb), cost
                else:
                    scale = (dp / cost) ** (1.0 / p)
                    atoms = X + scale * (Yb - X)
                    atoms = self._project(atoms, X)
                    weights = w
                    primal = float(w @ self.loss.value(atoms, a))
                    tcost = float(w @ self.norm.cost(atoms - X))
            else:
                c_lo, c_hi = float(w @ lo_res[3]), float(w @ hi_res[3])
                theta = 1.0 if c_lo == c_hi else (dp - c_hi) / (c_lo - c_hi)
                theta = min(max(theta, 0.0), 1.0)
                atoms = np.vstack([lo_res[0], hi_res[0]])
                weights = np.concatenate([theta * w, (1.0 - theta) * w])
                primal = theta * float(w @ lo_res[2]) + (1.0 - theta) * float(w @ hi_res[2])
                tcost = theta * c_lo + (1.0 - theta) * c_hi
                Yb = hi_res[0]
        keep = weights >= 1e-15
        wc = DiscreteMeasure(atoms[keep], weights[keep] / weights[keep].sum())
        gap = value - primal
        return DualEvalResult(float(value), float(lam_star), Yb.copy(), wc, float(primal),
                              float(gap), float(tcost), delta, a, self.cfg.seed, self.n_evals,
                              info={"bracket": [lam_lo, lam_hi], "lipschitz": L})


def _lnorm_rows(G, s):
    if s == 2.0:
        return np.linalg.norm(G, axis=1)
    if math.isinf(s):
        return np.max(np.abs(G), axis=1)
    return np.sum(np.abs(G) ** s, axis=1) ** (1.0 / s)


def norm_dual_rows(Z, r):
    return _lnorm_rows(Z, r)


def _h_rows(G, s):
    """h-map for a full-coordinate l^s norm, row-wise."""
    return h_map(NormSpec(s=s, p=2.0), G)


# ---------------------------------------------------------------- public API


def eval_dual(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta, a=None,
              support: SupportSpec | None = None, config: OracleConfig | None = None):
    """Robust value V(delta, a) with dual multiplier and a worst-case measure."""
    config = config or OracleConfig()
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float).reshape(loss.k)
    return _DualSolver(loss, mu, norm, delta, support, config).evaluate(a)


def eval_dual_constrained(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta,
                          constraints, a=None, support: SupportSpec | None = None,
                          config: OracleConfig | None = None, eta0=None):
    """Robust value over the ball intersected with {int Phi dnu = 0}.

    Uses the Lagrangian form inf_eta V_eta(delta, a), where V_eta is the
    unconstrained robust value of f + <eta, Phi>. Returns (value, eta, inner result).
    """
    config = config or OracleConfig()
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float).reshape(loss.k)
    m = constraints.m

    def lagr(eta):
        return loss.plus_linear_x(eta, constraints.grads, constraints.values, constraints.hess_fn)

    def val(eta):
        return eval_dual(lagr(eta), mu, norm, delta, a, support, config)

    if eta0 is None:
        G = loss.grad_x(mu.atoms, a)
        J = constraints.grads(mu.atoms)
        A = mu.integrate(np.einsum("nid,njd->nij", J, J))
        b = mu.integrate(np.einsum("nid,nd->ni", J, G))
        try:
            eta0 = -np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            eta0 = np.zeros(m)
    eta0 = np.asarray(eta0, dtype=float).reshape(m)
    if m == 1:
        from ._numerics import bracket_minimum, golden_section
        f1 = lambda t: val(np.array([t])).value
        lo, hi = bracket_minimum(f1, eta0[0], 0.05 * (1.0 + abs(eta0[0])))
        t, _ = golden_section(f1, lo, hi, xtol=1e-9)
        eta = np.array([t])
    else:
        res = minimize(lambda e: val(e).value, eta0, method="Nelder-Mead",
                       options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 4000})
        eta = res.x
    inner = val(eta)
    return inner.value, eta, inner


def eval_primal_lowerbound(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta, a=None,
                           support: SupportSpec | None = None, return_measure=False):
    """Expected loss after shifting every atom by delta T(x), a feasible lower bound.

    T(x) = h(g) ||g||^(q-1) (int ||g||^q dmu)^(1/q - 1) with g = grad_x f(x, a),
    so that int ||T||_*^p dmu = 1. On a proper support S, atoms closer than
    sqrt(delta) to the boundary of S or with ||T|| > 1/sqrt(delta) are not moved.
    """
    if not norm.p > 1.0:
        from .sensitivity import P_ONE_MESSAGE
        raise ValidationError(P_ONE_MESSAGE)
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float).reshape(loss.k)
    X, w = mu.atoms, mu.weights
    if delta == 0:
        val = float(w @ loss.value(X, a))
        return (val, mu) if return_measure else val
    q = norm.q
    g = loss.grad_x(X, a)
    gn = norm.norm(g)
    total = float(w @ gn ** q)
    if total == 0.0:
        T = np.zeros_like(X)
    else:
        T = h_map(norm, g) * (gn ** (q - 1.0) * total ** (1.0 / q - 1.0))[:, None]
    support = support or SupportSpec()
    if not support.is_all:
        sq = math.sqrt(delta)
        tn = norm.dual(T)
        still = (support.boundary_distance(X) < sq) | (tn > 1.0 / sq)
        T[still] = 0.0
    Y = X + delta * T
    val = float(w @ loss.value(Y, a))
    if return_measure:
        return val, DiscreteMeasure(Y, w)
    return val


# ---------------------------------------------------------------- robust optimization


def robust_optimize(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta, a0=None,
                    support: SupportSpec | None = None, config: OracleConfig | None = None,
                    gtol=1e-7, max_iter=200):
    """Minimize a -> V(delta, a).

    Quasi-Newton steps use the envelope (Danskin) gradient int grad_a f dnu*
    over the worst-case measure; a compass search finishes the job when
    the gradient is unreliable (kinks, non-unique maximizers).
    """
    config = config or OracleConfig()
    k = loss.k
    if delta == 0:
        cert = solve_base_problem(loss, mu, a0)
        return OptimizerCertificate(cert.action, cert.residual, "robust", cert.value, 0.0)
    if k == 0:
        res = eval_dual(loss, mu, norm, delta, np.zeros(0), support, config)
        return OptimizerCertificate(np.zeros(0), 0.0, "robust", res.value, float(delta),
                                    info={"dual": res})
    solver = _DualSolver(loss, mu, norm, delta, support, config)
    if a0 is None:
        a0 = solve_base_problem(loss, mu).action
    a0 = np.asarray(a0, dtype=float).reshape(k)
    memo = {}
    trace = []
    state = {"lam": None}

    def evaluate(a):
        key = tuple(np.round(a, 15))
        if key not in memo:
            r = solver.evaluate(a, state["lam"])
            state["lam"] = r.lambda_star
            grad = r.worst_case.integrate(loss.grad_a(r.worst_case.atoms, a))
            memo[key] = (r, grad)
            trace.append((a.copy(), r.value))
        return memo[key]

    fun = lambda a: evaluate(a)[0].value
    jac = lambda a: evaluate(a)[1]
    res = minimize(fun, a0, jac=jac, method="BFGS", options={"gtol": gtol, "maxiter": max_iter})
    a = res.x
    r, grad = evaluate(a)
    gnorm = float(np.linalg.norm(grad))
    if gnorm > 10 * gtol:
        a, step = _compass(fun, a, scale=1e-2 * (1.0 + np.max(np.abs(a))), min_step=1e-9)
        r, grad = evaluate(a)
        gnorm = float(np.linalg.norm(grad))
        info_proxy = step
    else:
        info_proxy = gnorm
    if not np.isfinite(r.value):
        raise ConvergenceError("robust optimization failed", best=a, residual=gnorm, trace=trace)
    return OptimizerCertificate(a, gnorm, "robust", r.value, float(delta),
                                info={"dual": r, "stationarity_proxy": info_proxy,
                                      "n_outer": len(trace)})


def _compass(fun, a, scale, min_step, max_evals=4000):
    """Compass (pattern) search; returns (minimizer, final step)."""
    a = a.copy()
    fa = fun(a)
    step = scale
    k = a.size
    evals = 0
    while step > min_step and evals < max_evals:
        improved = False
        for i in range(k):
            for sgn in (1.0, -1.0):
                b = a.copy()
                b[i] += sgn * step
                fb = fun(b)
                evals += 1
                if fb < fa - 1e-15 * (1.0 + abs(fa)):
                    a, fa, improved = b, fb, True
                    break
        if not improved:
            step *= 0.5
    return a, step


# ---------------------------------------------------------------- finite-difference slopes


@dataclass
class RobustPath:
    """Robust values and optimizers along a decreasing delta grid."""

    deltas: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    base_value: float
    base_action: np.ndarray
    results: list

    def to_rows(self):
        rows = [(0.0, self.base_value, *self.base_action)]
        for d, v, a in zip(self.deltas, self.values, self.actions):
            rows.append((d, v, *a))
        return rows


def _check_deltas(deltas, config):
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 1 or len(deltas) < 3:
        raise ValidationError("need at least three deltas")
    if np.any(deltas <= 0) or np.any(np.diff(deltas) >= 0):
        raise ValidationError("deltas must be positive and strictly decreasing")
    if 10.0 * config.tol > deltas.min():
        raise ValidationError(f"oracle tolerance {config.tol:g} is not 10x tighter than the "
                              f"smallest delta {deltas.min():g}")
    return deltas


def robust_path(loss, mu, norm, deltas, a_star=None, reoptimize=True, support=None, config=None):
    """Solve the robust problem at each delta (warm-started from the previous one)."""
    config = config or OracleConfig()
    deltas = _check_deltas(deltas, config)
    if a_star is None:
        base = solve_base_problem(loss, mu)
        a_star = base.action
    a_star = np.asarray(getattr(a_star, "action", a_star), dtype=float).reshape(loss.k)
    v0 = loss.expected(mu, a_star)
    values, actions, results = [], [], []
    a_prev = a_star
    for dlt in sorted(deltas):
        if reoptimize and loss.k > 0:
            cert = robust_optimize(loss, mu, norm, dlt, a_prev, support, config)
            a_d, v = cert.action, cert.value
            results.append(cert.info.get("dual"))
            a_prev = a_d
        else:
            r = eval_dual(loss, mu, norm, dlt, a_star, support, config)
            a_d, v = a_star, r.value
            results.append(r)
        values.append(v)
        actions.append(np.array(a_d))
    order = np.argsort(-np.array(sorted(deltas)))
    values = np.array(values)[order]
    actions = np.array(actions).reshape(len(deltas), loss.k)[order]
    results = [results[i] for i in order]
    return RobustPath(np.array(deltas), values, actions, v0, a_star, results)


@dataclass
class SlopeEstimate:
    slope: np.ndarray | float
    secants: np.ndarray
    deltas: np.ndarray
    path: RobustPath


def fd_value_slope(loss, mu, norm, deltas=(0.04, 0.02, 0.01, 0.005), a_star=None,
                   reoptimize=True, support=None, config=None, path=None, noise_tol=1e-9):
    """Extrapolated slope at 0 of delta -> V(delta) from secants on a delta grid."""
    if path is None:
        path = robust_path(loss, mu, norm, deltas, a_star, reoptimize, support, config)
    v_inc = np.concatenate([[path.base_value], path.values[::-1]])
    if np.any(np.diff(v_inc) < -noise_tol * (1.0 + np.abs(v_inc[1:]))):
        raise NumericalError("V(delta) is not monotone on the grid: tighten the oracle tolerance "
                             f"(values {v_inc.tolist()})")
    sec = (path.values - path.base_value) / path.deltas
    slope = float(neville_at_zero(path.deltas, sec))
    return SlopeEstimate(slope, sec, path.deltas, path)


def fd_optimizer_slope(loss, mu, norm, deltas=(0.04, 0.02, 0.01, 0.005), a_star=None,
                       support=None, config=None, path=None, osc_tol=1e-3):
    """Extrapolated derivative at 0 of the robust optimizer, componentwise."""
    if path is None:
        if loss.k == 0:
            raise ValidationError("the loss has no action")
        path = robust_path(loss, mu, norm, deltas, a_star, True, support, config)
    sec = (path.actions - path.base_action) / path.deltas[:, None]
    slope = np.array([neville_at_zero(path.deltas, sec[:, j]) for j in range(sec.shape[1])])
    # oscillation guard: second differences of secants alternating in sign and large
    if len(path.deltas) >= 4:
        d1 = np.diff(sec, axis=0)
        big = np.abs(d1) > osc_tol * (1.0 + np.abs(sec[:-1]))
        alt = (np.sign(d1[1:]) * np.sign(d1[:-1]) < 0) & big[1:] & big[:-1]
        if np.any(np.all(alt, axis=0)):
            raise NumericalError(f"optimizer trajectory oscillates; secants {sec.tolist()}")
    return SlopeEstimate(slope, sec, path.deltas, path)
