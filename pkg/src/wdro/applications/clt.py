"""Monte Carlo study of robust estimators at radius 1/sqrt(N) and their out-of-sample error."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..catalog import payoff
from ..errors import ValidationError, WdroError
from ..measures import DiscreteMeasure, NormSpec, make_empirical
from ..oracle import robust_optimize
from ..problem import LossModel, solve_base_problem
from ..sensitivity import beth_direction, lq_norm
from .regression import exact_sqrt_regression


@dataclass(frozen=True)
class CltStudyConfig:
    """``sampler`` describes the true law; N observations per replication, M replications."""

    sampler: dict
    N: int
    M: int
    seed: int = 0
    reference_size: int = 200_000

    def __post_init__(self):
        if int(self.N) < 1 or int(self.M) < 1:
            raise ValidationError("N and M must be >= 1")
        if int(self.reference_size) < 1:
            raise ValidationError("reference_size must be >= 1")
        sampler_dim(self.sampler)


def sampler_dim(spec):
    kind = spec.get("kind")
    if kind == "normal":
        return np.atleast_1d(spec.get("mean", 0.0)).size
    if kind == "linear-gaussian":
        return np.atleast_1d(spec["coefs"]).size + 1
    raise ValidationError(f"unknown sampler {kind!r}; known: normal, linear-gaussian")


def draw(spec, n, rng):
    """n i.i.d. draws from the sampler as an (n, d) array."""
    kind = spec.get("kind")
    if kind == "normal":
        mean = np.atleast_1d(np.asarray(spec.get("mean", 0.0), dtype=float))
        std = np.broadcast_to(np.asarray(spec.get("std", 1.0), dtype=float), mean.shape)
        return mean + std * rng.standard_normal((n, mean.size))
    if kind == "linear-gaussian":
        coefs = np.atleast_1d(np.asarray(spec["coefs"], dtype=float))
        X = rng.standard_normal((n, coefs.size))
        y = X @ coefs + float(spec.get("noise", 1.0)) * rng.standard_normal(n)
        return np.column_stack([X, y])
    raise ValidationError(f"unknown sampler {kind!r}")


def population_action(spec, loss: LossModel):
    """Exact a* for the sampler/loss pairings where it is known, else None."""
    kind = spec.get("kind")
    if kind == "normal" and loss.name == "quadratic-tracking":
        return np.atleast_1d(np.asarray(spec.get("mean", 0.0), dtype=float)).copy()
    if kind == "linear-gaussian" and loss.name in ("regression", "sqrt-regression"):
        return np.atleast_1d(np.asarray(spec["coefs"], dtype=float)).copy()
    return None


def _regression_norm_on_covariates(loss, norm):
    k = loss.k
    return norm.p == 2.0 and norm.active is not None and tuple(norm.active) == tuple(range(k))


def robust_action(loss: LossModel, mu: DiscreteMeasure, norm: NormSpec, delta, a0=None,
                  config=None):
    """Robust optimizer at radius delta: closed form where available, oracle otherwise."""
    if loss.name == "quadratic-tracking" and norm.p == 2.0 and norm.s == 2.0 and norm.active is None:
        # V(delta, a) = (sqrt(int |x - a|^2) + delta)^2 is minimized by the mean
        return mu.mean()
    if loss.name in ("regression", "sqrt-regression") and _regression_norm_on_covariates(loss, norm):
        return exact_sqrt_regression(mu, norm.s, delta).action
    cert = robust_optimize(loss, mu, norm, delta, a0=a0, config=config)
    return cert.action


@dataclass
class TruthQuantities:
    a_star: np.ndarray
    hessian: np.ndarray
    cov_h: np.ndarray
    theta: np.ndarray
    mean_shift: np.ndarray
    cov: np.ndarray
    oos: float


def truth_quantities(loss: LossModel, norm: NormSpec, ref: DiscreteMeasure, a_star=None):
    """Population quantities of the limit law, evaluated on a large reference measure."""
    if a_star is None:
        a_star = solve_base_problem(loss, ref).action
    a_star = np.asarray(a_star, dtype=float)
    Hv = loss.expected_hess_a(ref, a_star)
    ga = loss.grad_a(ref.atoms, a_star)
    cov_h = (ga * ref.weights[:, None]).T @ ga
    ups, numerator, _ = beth_direction(loss, ref, norm, a_star, strict=False)
    theta = ups ** (1.0 - norm.q) * numerator if ups > 0 else np.zeros(loss.k)
    Hinv = np.linalg.inv(Hv)
    mean_shift = -Hinv @ theta
    cov = Hinv @ cov_h @ Hinv
    # E of (1/2)(H - Theta)^T Hv^{-1} (H - Theta) with H ~ N(0, cov_h)
    oos = 0.5 * (float(np.trace(Hinv @ cov_h)) + float(theta @ Hinv @ theta))
    return TruthQuantities(a_star, Hv, cov_h, theta, mean_shift, cov, oos)


@dataclass
class CltReport:
    N: int
    M: int
    seed: int
    delta: float
    truth: TruthQuantities
    scaled_errors: np.ndarray
    scaled_errors_nonrobust: np.ndarray
    oos_scaled: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def n_ok(self):
        return int(self.scaled_errors.shape[0])

    @property
    def mean(self):
        return self.scaled_errors.mean(axis=0)

    @property
    def cov(self):
        return np.atleast_2d(np.cov(self.scaled_errors, rowvar=False))

    @property
    def standard_error(self):
        return self.scaled_errors.std(axis=0, ddof=1) / np.sqrt(self.n_ok)

    def z_scores(self):
        """(empirical mean - predicted shift) / standard error, componentwise."""
        return (self.mean - self.truth.mean_shift) / self.standard_error

    def to_dict(self):
        t = self.truth
        return {
            "N": self.N, "M": self.M, "seed": self.seed, "delta": self.delta,
            "replications_ok": self.n_ok, "failures": self.failures,
            "a_star": t.a_star, "theta": t.theta, "hessian": t.hessian,
            "predicted_mean_shift": t.mean_shift, "predicted_cov": t.cov,
            "empirical_mean": self.mean, "empirical_cov": self.cov,
            "standard_error": self.standard_error, "z_scores": self.z_scores(),
            "nonrobust_empirical_mean": self.scaled_errors_nonrobust.mean(axis=0),
            "oos_scaled_mean": float(self.oos_scaled.mean()),
            "oos_scaled_standard_error": float(self.oos_scaled.std(ddof=1) / np.sqrt(self.n_ok))
            if self.n_ok > 1 else float("nan"),
            "oos_predicted": t.oos,
        }


def _threads():
    env = os.environ.get("WDRO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"WDRO_THREADS must be an integer, got {env!r}") from None
    return min(8, os.cpu_count() or 1)


def clt_study(config: CltStudyConfig, loss: LossModel, norm: NormSpec, oracle_config=None):
    """Replicate sqrt(N)(a*^N_{1/sqrt(N)} - a*) and N times the out-of-sample error.

    Replications use generators spawned from the master seed; results are
    collected by replication index, so the report does not depend on the
    thread count. A replication whose solver fails is recorded and skipped.
    """
    if sampler_dim(config.sampler) != loss.d:
        raise ValidationError(f"sampler dimension {sampler_dim(config.sampler)} does not match "
                              f"the loss state dimension {loss.d}")
    if not norm.p > 1.0:
        from ..sensitivity import P_ONE_MESSAGE
        raise ValidationError(P_ONE_MESSAGE)
    N, M = int(config.N), int(config.M)
    delta = 1.0 / np.sqrt(N)
    ss = np.random.SeedSequence(int(config.seed))
    ref_seq, *rep_seqs = ss.spawn(M + 1)
    ref = make_empirical(draw(config.sampler, int(config.reference_size), np.random.default_rng(ref_seq)))
    truth = truth_quantities(loss, norm, ref, population_action(config.sampler, loss))
    base_ref = loss.expected(ref, truth.a_star)

    def one(i):
        rng = np.random.default_rng(rep_seqs[i])
        mu = make_empirical(draw(config.sampler, N, rng))
        try:
            a_n = solve_base_problem(loss, mu, truth.a_star).action
            a_d = robust_action(loss, mu, norm, delta, a0=a_n, config=oracle_config)
        except WdroError as exc:
            return i, None, f"{type(exc).__name__}: {exc}"
        oos = N * (loss.expected(ref, a_d) - base_ref)
        return i, (np.sqrt(N) * (a_d - truth.a_star), np.sqrt(N) * (a_n - truth.a_star), oos), None

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(one, range(M)))
    ok = [r for _, r, _ in results if r is not None]
    failures = [{"replication": i, "error": e} for i, _, e in results if e is not None]
    if len(ok) < 2:
        raise ValidationError(f"only {len(ok)} of {M} replications succeeded: {failures[:3]}")
    return CltReport(N, M, int(config.seed), float(delta), truth,
                     np.array([r[0] for r in ok]), np.array([r[1] for r in ok]),
                     np.array([r[2] for r in ok]), failures)


def anderson_first_order_gap(g, mu: DiscreteMeasure, a_star, p=2.0, delta=1.0):
    """-sign(a*) (int |g'|^q dmu)^(1/q) delta for f(x, a) = a^2 / 2 - g(x) a (d = 1)."""
    if mu.dim != 1:
        raise ValidationError("the quadratic comparison is one-dimensional")
    if not p > 1.0:
        from ..sensitivity import P_ONE_MESSAGE
        raise ValidationError(P_ONE_MESSAGE)
    (_, gg, _), _, _ = payoff(g, 1)
    q = p / (p - 1.0)
    return -float(np.sign(np.ravel(a_star)[0])) * lq_norm(mu, np.abs(gg(mu.atoms)[:, 0]), q) * delta
