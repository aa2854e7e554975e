"""Robust option pricing, OCE / AV@R and hedging sensitivities."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from ..catalog import builtin_loss, martingale_constraint
from ..errors import SingularHessianError, ValidationError
from ..measures import DiscreteMeasure, NormSpec
from ..oracle import eval_dual, eval_dual_constrained
from ..problem import solve_base_problem
from ..sensitivity import SensitivityReport, beth_direction, upsilon


@dataclass(frozen=True)
class BlackScholesSpec:
    """Black-Scholes call with zero rates; ``n_atoms`` sizes the discretized law of S_T / S0."""

    S0: float = 1.0
    K: float = 1.2
    T: float = 1.0
    sigma: float = 0.2
    n_atoms: int = 100_000

    def __post_init__(self):
        for name in ("S0", "K", "T", "sigma"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be positive, got {v}")
        if int(self.n_atoms) < 1:
            raise ValidationError("n_atoms must be >= 1")

    @property
    def vol(self):
        return self.sigma * math.sqrt(self.T)

    @property
    def d_minus(self):
        return (math.log(self.S0 / self.K) - 0.5 * self.vol ** 2) / self.vol

    @property
    def d_plus(self):
        return self.d_minus + self.vol


def lognormal_measure(spec: BlackScholesSpec, n_atoms=None):
    """Equal-weight quantile discretization of S_T / S0, rescaled to mean exactly 1."""
    n = int(spec.n_atoms if n_atoms is None else n_atoms)
    u = (np.arange(n) + 0.5) / n
    x = np.exp(-0.5 * spec.vol ** 2 + spec.vol * ndtri(u))
    x = x / x.mean()
    return DiscreteMeasure(x[:, None], np.full(n, 1.0 / n))


def bs_call_price(spec: BlackScholesSpec):
    return spec.S0 * ndtr(spec.d_plus) - spec.K * ndtr(spec.d_minus)


def bs_call_upsilon(spec: BlackScholesSpec):
    """S0 sqrt(Phi(d-) (1 - Phi(d-))): martingale-constrained call sensitivity."""
    m = ndtr(spec.d_minus)
    return spec.S0 * math.sqrt(m * (1.0 - m))


def bs_vega(spec: BlackScholesSpec):
    """S0 phi(d+); the derivative of the price in sigma for T = 1."""
    return spec.S0 * math.exp(-0.5 * spec.d_plus ** 2) / math.sqrt(2.0 * math.pi)


def call_upsilon_empirical(mu: DiscreteMeasure, S0, K):
    """S0 sqrt(mu_k (1 - mu_k)) with mu_k the mass of [K / S0, inf)."""
    if mu.dim != 1:
        raise ValidationError("call sensitivity needs a one-dimensional measure of gross returns")
    # compare S0 x >= K rather than x >= K / S0 so an atom at the strike is kept exactly
    mk = float(np.sum(mu.weights[S0 * mu.atoms[:, 0] >= K]))
    mk = min(max(mk, 0.0), 1.0)
    return S0 * math.sqrt(mk * (1.0 - mk))


def robust_call_value(mu: DiscreteMeasure, S0, K, delta, p=2.0, config=None):
    """Oracle value of the martingale-constrained robust call price at radius delta.

    Returns (value, Lagrange multiplier of the martingale constraint).
    """
    loss = builtin_loss("call", S0=S0, K=K)
    cons = martingale_constraint([1.0])
    if delta == 0:
        return loss.expected(mu, np.zeros(0)), np.zeros(1)
    mk = float(np.sum(mu.weights[S0 * mu.atoms[:, 0] >= K]))
    val, eta, _ = eval_dual_constrained(loss, mu, NormSpec(2.0, None, p), delta, cons,
                                        np.zeros(0), config=config, eta0=[-S0 * mk])
    return val, eta


def robust_call_curve(spec: BlackScholesSpec, deltas, n_atoms=400, config=None):
    """Rows (delta, oracle value, first-order value) on a quantile discretization."""
    mu = lognormal_measure(spec, n_atoms)
    ups = call_upsilon_empirical(mu, spec.S0, spec.K)
    v0 = robust_call_value(mu, spec.S0, spec.K, 0.0)[0]
    rows = []
    for d in deltas:
        v = v0 if d == 0 else robust_call_value(mu, spec.S0, spec.K, d, config=config)[0]
        rows.append((float(d), float(v), v0 + ups * d))
    return rows, ups


def upsilon_vega_curve(strikes, S0=1.0, T=1.0, sigma=0.2):
    rows = []
    for K in strikes:
        spec = BlackScholesSpec(S0, float(K), T, sigma)
        rows.append((float(K), bs_call_upsilon(spec), bs_vega(spec)))
    return rows


# ---------------------------------------------------------------- AV@R


def avar_upsilon(z_star, alpha, p=2.0):
    """|z*| / alpha^(1/p), the first-order sensitivity of AV@R_alpha(<z*, X>)."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    return float(np.linalg.norm(np.atleast_1d(z_star))) / alpha ** (1.0 / p)


def avar_loss(z, alpha):
    """f(x, m) = m + (<z, x> - m)^+ / alpha."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return builtin_loss("oce", l={"name": "avar", "alpha": alpha},
                        g={"name": "linear", "c": z.tolist()}, d=len(z))


def empirical_avar(mu: DiscreteMeasure, z, alpha):
    """AV@R_alpha of <z, X> (upper tail) on a discrete measure, with its V@R."""
    vals = mu.atoms @ np.atleast_1d(z)
    order = np.argsort(-vals)
    v, w = vals[order], mu.weights[order]
    cum = np.cumsum(w)
    j = int(np.searchsorted(cum, alpha - 1e-15))
    var = v[min(j, len(v) - 1)]
    return float(var + np.sum(w * np.maximum(v - var, 0.0)) / alpha), float(var)


def avar_robust_value(mu: DiscreteMeasure, z, alpha, delta, p=2.0, config=None, xtol=1e-10):
    """inf over m of the oracle value of m + E_nu (<z, X> - m)^+ / alpha.

    The map m -> V(delta, m) is convex, so golden section on a bracket
    around the empirical V@R finds the robust optimum. Returns (value, m).
    """
    from .._numerics import bracket_minimum, golden_section
    loss = avar_loss(z, alpha)
    nrm = NormSpec(2.0, None, p)
    base, var = empirical_avar(mu, z, alpha)
    if delta == 0:
        return base, var

    def fv(m):
        return eval_dual(loss, mu, nrm, delta, [m], config=config).value

    spread = float(np.std(mu.atoms @ np.atleast_1d(z))) + 1e-12
    lo, hi = bracket_minimum(fv, var, 0.05 * spread)
    m, v = golden_section(fv, lo, hi, xtol=xtol)
    return v, m


# ---------------------------------------------------------------- OCE and hedging


def oce_sensitivities(l, g, mu: DiscreteMeasure, norm: NormSpec, kind="oce", x0=None,
                      a0=None):
    """Upsilon and beth for OCE, hedging, or combined OCE-hedging losses.

    ``kind`` selects f = l(g - a) + a ("oce"), l(g + <a, x - x0>) ("hedging"),
    or l(g + <H, x - x0> + m) - m ("oce-hedging").
    """
    d = mu.dim
    if kind == "oce":
        loss = builtin_loss("oce", l=l, g=g, d=d)
    elif kind in ("hedging", "oce-hedging"):
        x0 = np.ones(d) if x0 is None else x0
        loss = builtin_loss(kind, l=l, g=g, x0=x0)
    else:
        raise ValidationError(f"unknown kind {kind!r}")
    cert = solve_base_problem(loss, mu, a0)
    rep = upsilon(loss, mu, norm, cert)
    ups, numerator, _ = beth_direction(loss, mu, norm, cert.action, strict=False)
    H = loss.expected_hess_a(mu, cert.action)
    q = norm.q
    if np.all(np.abs(numerator) == 0.0) or ups == 0.0:
        b = np.zeros(loss.k)  # 0/0 convention: no curvature and no mixed term
    else:
        try:
            b = -(ups ** (1.0 - q)) * np.linalg.solve(H, numerator)
            if not np.all(np.isfinite(b)) or np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            raise SingularHessianError(
                "the expected curvature of l vanishes (int l'' dmu = 0) but the mixed term "
                "does not; the optimizer sensitivity is undefined",
                eigenvalues=np.linalg.eigvalsh(H)) from None
    return SensitivityReport(rep.upsilon, q, norm.p, beth=b, a_star=cert.action,
                             integrals={"grad_x_Lq_norm": rep.upsilon, "hessian_base_value": H,
                                        "numerator": numerator},
                             diagnostics={"loss": loss.name})
