"""Log-normal mixture priors over survival times, and their EM fitting."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

logger = logging.getLogger(__name__)

MAX_COMPONENTS = 5
SIGMA_FLOOR = 1e-3
VARIANCE_PRIOR = 1.0


@dataclass(frozen=True)
class LogNormalComponent:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class DurationSample:
    duration: float
    censored: bool = False

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True, eq=False)
class SurvivalMixture:
    """Mixture of log-normal survival-time densities.

    ``degraded`` is set by :func:`fit_mixture` when EM hit its iteration cap.
    """

    components: tuple[LogNormalComponent, ...]
    weights: tuple[float, ...]
    degraded: bool = False
    _mu: np.ndarray = field(init=False, repr=False)
    _sigma: np.ndarray = field(init=False, repr=False)
    _log_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        comps = tuple(self.components)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", weights)
        if not 1 <= len(comps) <= MAX_COMPONENTS:
            raise ValueError(f"need 1..{MAX_COMPONENTS} components, got {len(comps)}")
        if len(weights) != len(comps):
            raise ValueError("weights and components differ in length")
        if any(w < 0 or w > 1 for w in weights) or abs(math.fsum(weights) - 1) > 1e-9:
            raise ValueError(f"weights must lie in [0,1] and sum to 1: {weights}")
        object.__setattr__(self, "_mu", np.array([c.mu for c in comps]))
        object.__setattr__(self, "_sigma", np.array([c.sigma for c in comps]))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_weights", np.log(np.array(weights)))

    @classmethod
    def single(cls, mu: float, sigma: float) -> SurvivalMixture:
        return cls((LogNormalComponent(mu, sigma),), (1.0,))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def log_weights(self) -> np.ndarray:
        return self._log_weights

    def __eq__(self, other):
        if not isinstance(other, SurvivalMixture):
            return NotImplemented
        return self.components == other.components and self.weights == other.weights

    def __hash__(self):
        return hash((self.components, self.weights))

    # vectorised over components; t is time since the survival clock started
    def _z(self, t: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return (np.log(t) - self._mu) / self._sigma

    def log_survival(self, t: float) -> np.ndarray:
        """log(1 - F_l(t)) for every component."""
        if t <= 0:
            return np.zeros(self.n_components)
        return log_ndtr(-self._z(t))

    def log_cdf_increment(self, t0: float, t1: float) -> np.ndarray:
        """log(F_l(t1) - F_l(t0)) for every component, computed without cancellation."""
        if t1 <= t0:
            return np.full(self.n_components, -np.inf)
        z0, z1 = self._z(t0), self._z(t1)
        out = np.empty(self.n_components)
        upper = z0 > 0
        with np.errstate(divide="ignore"):
            # upper tail: S(t0) - S(t1); lower tail: F(t1) - F(t0)
            ls0, ls1 = log_ndtr(-z0[upper]), log_ndtr(-z1[upper])
            out[upper] = ls0 + np.log1p(-np.exp(ls1 - ls0))
            lf0, lf1 = log_ndtr(z0[~upper]), log_ndtr(z1[~upper])
            out[~upper] = lf1 + np.log1p(-np.exp(lf0 - lf1))
        return out

    def cdf(self, t: float) -> np.ndarray:
        if t <= 0:
            return np.zeros(self.n_components)
        return ndtr(self._z(t))

    def median(self, component_index: int) -> float:
        return math.exp(self.components[component_index].mu)

    def to_dict(self) -> dict:
        return {
            "components": [{"mu": c.mu, "sigma": c.sigma} for c in self.components],
            "weights": list(self.weights),
        }

    @classmethod
    def from_dict(cls, data: dict) -> SurvivalMixture:
        comps = tuple(LogNormalComponent(float(c["mu"]), float(c["sigma"])) for c in data["components"])
        return cls(comps, tuple(float(w) for w in data["weights"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> SurvivalMixture:
        return cls.from_dict(json.loads(text))


def _check_index(mix: SurvivalMixture, component_index: int):
    if not 0 <= component_index < mix.n_components:
        raise IndexError(f"component {component_index} out of range for L={mix.n_components}")


def survival_function(mix: SurvivalMixture, component_index: int, t: float) -> float:
    """1 - F_l(t) for one component."""
    _check_index(mix, component_index)
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return 1.0
    c = mix.components[component_index]
    return float(ndtr(-(math.log(t) - c.mu) / c.sigma))


def cdf_increment(mix: SurvivalMixture, component_index: int, t0: float, t1: float) -> float:
    """F_l(t1) - F_l(t0)."""
    _check_index(mix, component_index)
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    if t1 < t0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    if t1 == t0:
        return 0.0
    c = mix.components[component_index]
    z0 = -np.inf if t0 == 0 else (math.log(t0) - c.mu) / c.sigma
    z1 = np.inf if math.isinf(t1) else (math.log(t1) - c.mu) / c.sigma
    if z0 > 0:
        return float(ndtr(-z0) - ndtr(-z1))
    return float(ndtr(z1) - ndtr(z0))


# ---------------------------------------------------------------------------
# EM fitting on log-durations with right-censoring


@dataclass
class _EMFit:
    mu: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    log_likelihood: float
    converged: bool
    trace: list[float]  # EM objective per iteration (log-likelihood plus variance prior)


def _component_loglik(u, censored, mu, sigma):
    """Per-sample, per-component log density (uncensored) or log survival (censored)."""
    z = (u[:, None] - mu[None, :]) / sigma[None, :]
    # the -u Jacobian keeps the likelihood on the duration scale
    out = -0.5 * z**2 - np.log(sigma)[None, :] - 0.5 * math.log(2 * math.pi) - u[:, None]
    if censored.any():
        out[censored] = log_ndtr(-z[censored])
    return out


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def _observed_loglik(u, censored, mu, sigma, weights):
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    return float(logsumexp(_component_loglik(u, censored, mu, sigma) + lw[None, :], axis=1).sum())


def _kmeanspp(u: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [u[rng.integers(len(u))]]
    for _ in range(1, k):
        d2 = np.min((u[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(u[rng.integers(len(u))])
            continue
        centers.append(u[rng.choice(len(u), p=d2 / total)])
    return np.sort(np.array(centers))


def _em(u, censored, k, rng, tol=1e-7, max_iter=500, prior_count=0.0) -> _EMFit:
    mu = _kmeanspp(u, k, rng)
    spread = max(float(np.std(u)), SIGMA_FLOOR)
    prior_var = spread**2
    sigma = np.maximum(np.full(k, spread / k), SIGMA_FLOOR)
    weights = np.full(k, 1.0 / k)
    any_censored = bool(censored.any())
    ex = np.repeat(u[:, None], k, axis=1)
    ex2 = ex**2

    def loglik_matrix(mu, sigma, weights):
        with np.errstate(divide="ignore"):
            return _component_loglik(u, censored, mu, sigma) + np.log(weights)[None, :]

    def penalty(sigma):
        # inverse-gamma prior on each variance worth prior_count pseudo-samples
        if prior_count == 0:
            return 0.0
        return float(np.sum(-prior_count * np.log(sigma) - prior_count * prior_var / (2 * sigma**2)))

    comp = loglik_matrix(mu, sigma, weights)
    norm = _logsumexp_rows(comp)
    loglik = float(norm.sum())
    prev = loglik + penalty(sigma)
    trace = [prev]
    converged = False
    for _ in range(max_iter):
        resp = np.exp(comp - norm)
        if any_censored:
            # censored samples use the moments of the normal truncated below at u
            uc = u[censored][:, None]
            z = (uc - mu[None, :]) / sigma[None, :]
            lam = np.exp(-0.5 * z**2 - 0.5 * math.log(2 * math.pi) - log_ndtr(-z))
            m1 = mu[None, :] + sigma[None, :] * lam
            var = sigma[None, :] ** 2 * (1 + z * lam - lam**2)
            ex[censored] = m1
            ex2[censored] = np.maximum(var, 0) + m1**2

        nk = resp.sum(axis=0)
        alive = nk > 1e-12
        new_mu = mu.copy()
        new_sigma = sigma.copy()
        new_mu[alive] = (resp * ex).sum(axis=0)[alive] / nk[alive]
        second = (resp * ex2).sum(axis=0)[alive] / nk[alive]
        scatter = np.maximum(second - new_mu[alive] ** 2, 0) * nk[alive]
        new_sigma[alive] = np.sqrt(
            np.maximum((scatter + prior_count * prior_var) / (nk[alive] + prior_count), SIGMA_FLOOR**2)
        )
        weights = nk / nk.sum()
        mu, sigma = new_mu, np.maximum(new_sigma, SIGMA_FLOOR)

        comp = loglik_matrix(mu, sigma, weights)
        norm = _logsumexp_rows(comp)
        loglik = float(norm.sum())
        cur = loglik + penalty(sigma)
        trace.append(cur)
        if abs(cur - prev) <= tol * max(abs(prev), 1.0):
            converged = True
            break
        prev = cur
    return _EMFit(mu, sigma, weights, loglik, converged, trace)


def aic(log_likelihood: float, n_components: int) -> float:
    return 2 * (3 * n_components - 1) - 2 * log_likelihood


def _to_mixture(fit: _EMFit) -> SurvivalMixture:
    order = np.argsort(fit.mu, kind="stable")
    w = fit.weights[order]
    w = w / math.fsum(w)
    comps = tuple(LogNormalComponent(float(fit.mu[i]), float(fit.sigma[i])) for i in order)
    return SurvivalMixture(comps, tuple(float(x) for x in w), degraded=not fit.converged)


def fit_mixture_candidates(
    samples: Sequence[DurationSample],
    max_components: int = MAX_COMPONENTS,
    restarts: int = 5,
    seed: int = 0,
    variance_prior: float = VARIANCE_PRIOR,
) -> list[tuple[SurvivalMixture, float, float]]:
    """Best EM fit for each L in 1..max_components as (mixture, log-likelihood, AIC).

    ``variance_prior`` is the weight, in pseudo-samples, of an inverse-gamma
    prior pulling each component variance towards the pooled log-duration
    variance. Zero gives plain maximum-likelihood EM.
    """
    if not 1 <= max_components <= MAX_COMPONENTS:
        raise ValueError(f"max_components must be in [1, {MAX_COMPONENTS}]")
    uncensored = [s for s in samples if not s.censored and s.duration > 0]
    if len(uncensored) < 2:
        raise ValueError("need at least 2 uncensored positive durations to fit a mixture")
    usable = [s for s in samples if s.duration > 0]
    u = np.log(np.array([s.duration for s in usable], dtype=float))
    censored = np.array([s.censored for s in usable], dtype=bool)
    rng = np.random.default_rng(seed)

    out = []
    for k in range(1, max_components + 1):
        best = None
        for _ in range(restarts if k > 1 else 1):
            fit = _em(u, censored, k, rng, prior_count=variance_prior)
            if best is None or fit.trace[-1] > best.trace[-1]:
                best = fit
        if not best.converged:
            logger.warning("EM for L=%d hit the iteration cap; keeping best-so-far", k)
        out.append((_to_mixture(best), best.log_likelihood, aic(best.log_likelihood, k)))
    return out


def fit_mixture(
    samples: Sequence[DurationSample],
    max_components: int = MAX_COMPONENTS,
    restarts: int = 5,
    seed: int = 0,
    variance_prior: float = VARIANCE_PRIOR,
) -> SurvivalMixture:
    """Fit L = 1..max_components by EM and return the AIC-minimising mixture.

    Ties go to the smaller L.
    """
    candidates = fit_mixture_candidates(samples, max_components, restarts, seed, variance_prior)
    best_mix, _, best_aic = candidates[0]
    for mix, _, score in candidates[1:]:
        if score < best_aic:
            best_mix, best_aic = mix, score
    return best_mix


def extract_durations(timestamps: Sequence[float], values: Sequence[int], which: str = "presence_runs") -> list[DurationSample]:
    """Run lengths of 1s (``presence_runs``) or 0s (``absence_runs``).

    A run lasts from its first sample to the first sample of the next run.
    The final run is closed one sampling step after its last sample; runs that
    touch either end of the series are censored.
    """
    if which not in ("presence_runs", "absence_runs"):
        raise ValueError(f"unknown run kind {which!r}")
    ts = np.asarray(timestamps, dtype=float)
    vs = np.asarray(values, dtype=int)
    if len(ts) != len(vs):
        raise ValueError("timestamps and values differ in length")
    if len(ts) == 0:
        return []
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    target = 1 if which == "presence_runs" else 0
    step = float(np.median(np.diff(ts))) if len(ts) > 1 else 1.0

    out = []
    n = len(vs)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and vs[j + 1] == vs[i]:
            j += 1
        if vs[i] == target:
            end = ts[j + 1] if j + 1 < n else ts[j] + step
            out.append(DurationSample(float(end - ts[i]), censored=(i == 0 or j == n - 1)))
        i = j + 1
    return out
