"""First-order sensitivities of Wasserstein-robust values and optimizers.

Notation: V(delta, a) is the worst-case expected loss over the W_p ball of
radius delta around mu, V(delta) = inf_a V(delta, a), and q = p / (p - 1).
``upsilon`` is V'(0); ``beth`` is the derivative of the robust optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._numerics import bracket_minimum, golden_section
from .errors import (AlternativeConditionError, DegenerateConstraintError, SingularHessianError,
                     ValidationError)
from .measures import DiscreteMeasure, NormSpec, h_map, wasserstein_distance
from .problem import ConstraintSet, LossModel, OptimizerCertificate, as_certificates

P_ONE_MESSAGE = ("Wasserstein order p must exceed 1: for p = 1 the first-order formula can fail "
                 "(f = x^2, mu = point mass at 0, S = [-1, 1] has V(delta) = delta while the "
                 "gradient formula gives 0)")

COND_CUTOFF = 1e12


@dataclass
class SensitivityReport:
    upsilon: float
    q: float
    p: float
    beth: np.ndarray | None = None
    a_star: np.ndarray | None = None
    lambda_star: np.ndarray | None = None
    integrals: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v
        return {"upsilon": self.upsilon, "beth": conv(self.beth), "q": self.q, "p": self.p,
                "a_star": conv(self.a_star), "lambda_star": conv(self.lambda_star),
                "integrals": conv(self.integrals), "diagnostics": conv(self.diagnostics)}


def _require_p(norm: NormSpec):
    if not norm.p > 1.0:
        raise ValidationError(P_ONE_MESSAGE)
    return norm.q


def lq_norm(mu: DiscreteMeasure, vals, q):
    """(sum_i w_i |v_i|^q)^(1/q) for nonnegative per-atom values."""
    vals = np.asarray(vals, dtype=float)
    if math.isinf(q):
        return float(np.max(vals[mu.weights > 0])) if vals.size else 0.0
    m = np.max(vals) if vals.size else 0.0
    if m == 0:
        return 0.0
    return float(m * (mu.integrate((vals / m) ** q)) ** (1.0 / q))


def gradient_norm_integral(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, a):
    """(int ||grad_x f(x, a)||^q dmu)^(1/q)."""
    q = _require_p(norm)
    g = loss.grad_x(mu.atoms, a)
    return lq_norm(mu, norm.norm(g), q)


def upsilon(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, optimizers=None):
    """V'(0) as the minimum over the supplied optimizers of ||grad_x f||_{L^q(mu)}."""
    q = _require_p(norm)
    certs = as_certificates(loss, mu, optimizers)
    values = [gradient_norm_integral(loss, mu, norm, c.action) for c in certs]
    i = int(np.argmin(values))
    return SensitivityReport(
        upsilon=float(values[i]), q=q, p=norm.p, a_star=certs[i].action,
        integrals={"grad_x_Lq_norm": float(values[i]), "base_value": loss.expected(mu, certs[i].action)},
        diagnostics={"candidates": [float(v) for v in values],
                     "stationarity_residual": certs[i].residual})


def _sym_inverse(H):
    H = 0.5 * (H + H.T)
    evals, evecs = np.linalg.eigh(H)
    amax = np.max(np.abs(evals)) if evals.size else 0.0
    amin = np.min(np.abs(evals)) if evals.size else 0.0
    cond = amax / amin if amin > 0 else math.inf
    if not cond <= COND_CUTOFF:
        raise SingularHessianError(
            f"Hessian of the base value is singular (condition number {cond:.3g}); "
            f"eigenvalues {evals.tolist()}", eigenvalues=evals)
    return (evecs / evals) @ evecs.T, cond, evals


def beth_direction(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, a, strict=True,
                   zero_tol=1e-12):
    """Pieces of the optimizer-sensitivity formula at action a.

    Returns (Lq norm, numerator integral, zero-gradient atom mask).
    The numerator is int cross(x) h(g) ||g||^(q-1) dmu, with g = grad_x f
    and atoms where g = 0 contributing zero.
    """
    q = _require_p(norm)
    X = mu.atoms
    g = loss.grad_x(X, a)
    gn = norm.norm(g)
    cross = loss.cross(X, a)
    scale = max(float(np.max(gn)), 1.0)
    zero = gn <= zero_tol * scale
    if strict and np.any(zero):
        bad = zero & (np.max(np.abs(cross.reshape(len(X), -1)), axis=1) > zero_tol * scale)
        if np.any(bad):
            idx = np.nonzero(bad)[0]
            raise AlternativeConditionError(
                "grad_x f vanishes while the mixed derivative does not at atoms "
                f"{idx.tolist()}", atoms=idx)
    hg = h_map(norm, g)
    weight = np.where(zero, 0.0, gn ** (q - 1.0))
    vec = hg * weight[:, None]
    numerator = mu.integrate(np.einsum("nkd,nd->nk", cross, vec))
    return lq_norm(mu, gn, q), numerator, zero


def beth(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, a_star=None, strict=True):
    """Derivative of the robust optimizer at delta = 0."""
    q = _require_p(norm)
    cert = as_certificates(loss, mu, a_star)[0]
    a = cert.action
    if loss.k == 0:
        raise ValidationError("optimizer sensitivity needs at least one action coordinate")
    ups, numerator, zero = beth_direction(loss, mu, norm, a, strict=strict)
    H = loss.expected_hess_a(mu, a)
    Hinv, cond, evals = _sym_inverse(H)
    if ups == 0.0:
        b = np.zeros(loss.k)
    else:
        b = -(ups ** (1.0 - q)) * (Hinv @ numerator)
    return SensitivityReport(
        upsilon=ups, q=q, p=norm.p, beth=b, a_star=a,
        integrals={"grad_x_Lq_norm": ups, "hessian_base_value": H, "numerator": numerator},
        diagnostics={"condition_number": cond, "hessian_eigenvalues": evals,
                     "zero_gradient_atoms": int(np.sum(zero)),
                     "stationarity_residual": cert.residual})


def influence_directional_average(loss: LossModel, mu: DiscreteMeasure, a_star):
    """Average derivative of the influence curve along grad_x f.

    The influence curve of the base optimizer is IC(y) = -H^{-1} grad_a f(y, a*);
    its derivative in the direction grad_x f(x, a*) averaged over mu is
    -H^{-1} int cross(x) grad_x f(x) dmu.
    """
    a = np.asarray(a_star, dtype=float).reshape(loss.k)
    X = mu.atoms
    H = loss.expected_hess_a(mu, a)
    Hinv, _, _ = _sym_inverse(H)
    num = mu.integrate(np.einsum("nkd,nd->nk", loss.cross(X, a), loss.grad_x(X, a)))
    return -(Hinv @ num)


def upsilon_at_r(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, r, a_star_r, worst_cases,
                 value=None, rtol=1e-6, vtol=1e-6, support=None):
    """One-sided derivative V'(r+) from a list of worst-case measures at radius r.

    Each measure is checked for W_p(mu, nu) <= r (1 + rtol) and for
    attaining the robust value (``value`` or, if None, the oracle value).
    """
    q = _require_p(norm)
    if r < 0:
        raise ValidationError("radius must be nonnegative")
    a = np.asarray(a_star_r.action if isinstance(a_star_r, OptimizerCertificate) else a_star_r,
                   dtype=float).reshape(loss.k)
    worst_cases = list(worst_cases) if worst_cases is not None else []
    if r == 0 and not worst_cases:
        worst_cases = [mu]
    if not worst_cases:
        raise ValidationError("no worst-case measures supplied")
    if value is None:
        if r == 0:
            value = loss.expected(mu, a)
        else:
            from .oracle import eval_dual
            value = eval_dual(loss, mu, norm, r, a, support=support).value
    out = []
    for j, nu in enumerate(worst_cases):
        dist = wasserstein_distance(mu, nu, norm)
        if dist > r * (1.0 + rtol) + 1e-12:
            raise ValidationError(f"worst case {j} lies outside the ball: W_p = {dist:.6g} > r = {r:.6g}")
        val = loss.expected(nu, a)
        if abs(val - value) > vtol * (1.0 + abs(value)):
            raise ValidationError(f"worst case {j} does not attain the robust value "
                                  f"({val:.10g} vs {value:.10g})")
        out.append(lq_norm(nu, norm.norm(loss.grad_x(nu.atoms, a)), q))
    return float(max(out))


# ------------------------------------------------------------------ constraints


def _constrained_objective(G, J, mu, norm, q):
    """Return F(lam) = int ||G + J lam||^q dmu and its gradient."""

    def F(lam):
        v = G + np.einsum("nmd,m->nd", J, lam)
        n = norm.norm(v)
        return float(mu.integrate(n ** q))

    def dF(lam):
        v = G + np.einsum("nmd,m->nd", J, lam)
        n = norm.norm(v)
        hv = h_map(norm, v) * (q * n ** (q - 1.0))[:, None]
        return mu.integrate(np.einsum("nd,nmd->nm", hv, J))

    return F, dF


def constraint_degeneracy(mu, norm, J, q, n_dirs=2000, seed=0):
    """Sampled min over unit lam of int ||sum_i lam_i grad Phi_i||^q dmu, and a rank test.

    The infimum is zero exactly when some lam != 0 annihilates the gradients
    on every atom, i.e. when the weighted stack of gradient matrices is rank
    deficient; that is checked through its smallest singular value. The
    sampled value is reported as a size diagnostic.
    """
    m = J.shape[1]
    mask = norm.mask(J.shape[2])
    stack = (np.sqrt(mu.weights)[:, None, None] * np.swapaxes(J[:, :, mask], 1, 2)).reshape(-1, m)
    sv = np.linalg.svd(stack, compute_uv=False)
    rel = float(sv[-1] / sv[0]) if sv.size and sv[0] > 0 else 0.0
    if m == 1:
        dirs = np.array([[1.0]])
    elif m == 2:
        t = np.linspace(0.0, np.pi, 361)
        dirs = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((n_dirs, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = [mu.integrate(norm.norm(np.einsum("nmd,m->nd", J, u)) ** q) for u in dirs]
    return float(min(vals)), rel


def upsilon_constrained(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec,
                        constraints: ConstraintSet, a_star=None, calib_tol=1e-8, lam_tol=1e-12):
    """inf over lam of ||grad_x f + sum_i lam_i grad Phi_i||_{L^q(mu)}."""
    q = _require_p(norm)
    cert = as_certificates(loss, mu, a_star)[0]
    a = cert.action
    X = mu.atoms
    calib = constraints.calibration_residual(mu)
    if np.max(np.abs(calib)) > calib_tol:
        raise ValidationError(f"mu does not satisfy the constraints: int Phi dmu = {calib.tolist()}")
    G = loss.grad_x(X, a)
    J = constraints.grads(X)
    scale = max(float(mu.integrate(np.sum(norm.norm(J) ** q, axis=1))), 1e-300)
    degen, rank_rel = constraint_degeneracy(mu, norm, J, q)
    if rank_rel <= 1e-10 or degen <= 1e-10 * scale:
        raise DegenerateConstraintError(
            "constraint gradients are linearly dependent in L^q(mu); remove redundant "
            f"constraints (reduce to a linearly independent subset), min = {degen:.3g}, "
            f"relative singular value = {rank_rel:.3g}")
    F, dF = _constrained_objective(G, J, mu, norm, q)
    m = constraints.m
    lam0 = np.zeros(m)
    if q == 2.0 and norm.s == 2.0:
        # least-squares multiplier: exact for the Euclidean case
        A = mu.integrate(np.einsum("nid,njd->nij", J, J))
        bvec = mu.integrate(np.einsum("nid,nd->ni", J, G))
        try:
            lam0 = -np.linalg.solve(A, bvec)
        except np.linalg.LinAlgError:
            lam0 = np.zeros(m)
    if m == 1:
        f1 = lambda t: F(np.array([t]))
        step = 1e-3 * (1.0 + abs(lam0[0]))
        lo, hi = bracket_minimum(f1, lam0[0], step)
        t, _ = golden_section(f1, lo, hi, xtol=lam_tol)
        lam = np.array([t])
    else:
        best = None
        starts = [lam0, np.zeros(m)] + [lam0 + np.eye(m)[i] for i in range(m)]
        for s0 in starts:
            res = minimize(F, s0, jac=dF, method="BFGS", options={"gtol": 1e-14, "maxiter": 2000})
            if best is None or res.fun < best.fun:
                best = res
        lam = best.x
    val = F(lam) ** (1.0 / q)
    unconstrained = lq_norm(mu, norm.norm(G), q)
    return SensitivityReport(
        upsilon=float(min(val, unconstrained)), q=q, p=norm.p, a_star=a, lambda_star=lam,
        integrals={"unconstrained_upsilon": unconstrained, "calibration_residual": calib},
        diagnostics={"degeneracy_min": degen, "constraint": constraints.name})


def martingale_closed_form(loss: LossModel, mu: DiscreteMeasure, a=None):
    """Standard deviation of grad_x f under mu (d = 1, p = 2, martingale constraint)."""
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float)
    if loss.d != 1:
        raise ValidationError("the martingale closed form is for d = 1")
    g = loss.grad_x(mu.atoms, a)[:, 0]
    m = mu.integrate(g)
    return float(np.sqrt(max(mu.integrate((g - m) ** 2), 0.0)))


def covariance_closed_form(loss: LossModel, mu: DiscreteMeasure, a=None):
    """Constrained sensitivity under Phi = x1 x2 - b with p = 2 (d = 2).

    Returns (value, optimal multiplier).
    """
    a = np.zeros(loss.k) if a is None else np.asarray(a, dtype=float)
    if loss.d != 2:
        raise ValidationError("the covariance closed form is for d = 2")
    X = mu.atoms
    g = loss.grad_x(X, a)
    cross = mu.integrate(g[:, 0] * X[:, 1] + g[:, 1] * X[:, 0])
    sq = mu.integrate(np.sum(X * X, axis=1))
    lam = -cross / sq
    val = mu.integrate(np.sum(g * g, axis=1)) - cross ** 2 / sq
    return float(np.sqrt(max(val, 0.0))), float(lam)


def first_order_value(v0, ups, delta):
    return v0 + ups * delta


def first_order_optimizer(a_star, beth_vec, delta):
    return np.asarray(a_star, dtype=float) + np.asarray(beth_vec, dtype=float) * delta
