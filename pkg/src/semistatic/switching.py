"""Switching priors, annealed Bayesian model selection and the mixed prediction.

An :class:`Estimator` pairs a persistence filter with an emergence filter.
Both see every observation; at query time the two are weighed by their
marginal evidences, flattened by ``exp(-alpha0 * (t - t_N))`` and combined
with the switching prior ``f(t) = p(emergence model governs at t)``.
"""
from __future__ import annotations

import ast
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from . import filter as pf
from .filter import FilterState, ModelKind, NoiseModel, Observation
from .survival import SurvivalMixture

PRIOR_EPS = 1e-9
WEEK_S = 7 * 24 * 3600.0
DAY_S = 24 * 3600.0
DAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


# ---------------------------------------------------------------------------
# switching priors


@dataclass(frozen=True)
class ConstantPrior:
    level: float = 0.5

    def __post_init__(self):
        if not 0 <= self.level <= 1:
            raise ValueError("constant prior level must lie in [0, 1]")

    def __call__(self, t):
        return np.full(np.shape(t), self.level) if np.ndim(t) else self.level

    def to_dict(self):
        return {"type": "constant", "level": self.level}


@dataclass(frozen=True)
class FourierTerm:
    omega: float
    amplitude: float
    phase: float


@dataclass(frozen=True, eq=False)
class FourierPrior:
    """Saturated truncated Fourier series ``clip(dc + sum A cos(w t - phi), 0, 1)``."""

    dc: float
    terms: tuple[FourierTerm, ...] = ()
    _omega: np.ndarray = field(init=False, repr=False)
    _amp: np.ndarray = field(init=False, repr=False)
    _phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        terms = tuple(t if isinstance(t, FourierTerm) else FourierTerm(*t) for t in self.terms)
        omegas = [t.omega for t in terms]
        if any(w <= 0 for w in omegas) or len(set(omegas)) != len(omegas):
            raise ValueError("Fourier frequencies must be positive and distinct")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_omega", np.array(omegas, dtype=float))
        object.__setattr__(self, "_amp", np.array([t.amplitude for t in terms], dtype=float))
        object.__setattr__(self, "_phase", np.array([t.phase for t in terms], dtype=float))

    def raw(self, t):
        t = np.asarray(t, dtype=float)
        if not self.terms:
            return np.full(t.shape, float(self.dc)) if t.ndim else float(self.dc)
        val = self.dc + np.cos(np.multiply.outer(t, self._omega) - self._phase) @ self._amp
        return val if t.ndim else float(val)

    def __call__(self, t):
        return np.clip(self.raw(t), 0.0, 1.0)

    def __eq__(self, other):
        return isinstance(other, FourierPrior) and self.dc == other.dc and self.terms == other.terms

    def to_dict(self):
        return {
            "type": "fourier",
            "dc": self.dc,
            "terms": [{"omega": t.omega, "amplitude": t.amplitude, "phase": t.phase} for t in self.terms],
        }


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    level: float = 1.0


@dataclass(frozen=True, eq=False)
class PiecewisePrior:
    """Piecewise-constant prior; with ``period`` set, time wraps modulo the period."""

    intervals: tuple[Interval, ...]
    default_level: float = 0.0
    period: float | None = None
    _starts: np.ndarray = field(init=False, repr=False)
    _ends: np.ndarray = field(init=False, repr=False)
    _levels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ivs = tuple(sorted((iv if isinstance(iv, Interval) else Interval(*iv) for iv in self.intervals),
                           key=lambda iv: iv.start))
        if not 0 <= self.default_level <= 1:
            raise ValueError("default level must lie in [0, 1]")
        for iv in ivs:
            if not iv.start < iv.end:
                raise ValueError(f"interval start must precede end: {iv}")
            if not 0 <= iv.level <= 1:
                raise ValueError(f"interval level must lie in [0, 1]: {iv}")
            if self.period is not None and not (0 <= iv.start and iv.end <= self.period):
                raise ValueError(f"interval {iv} does not fit in period {self.period}")
        for a, b in zip(ivs, ivs[1:]):
            if b.start < a.end:
                raise ValueError(f"overlapping intervals {a} and {b}")
        object.__setattr__(self, "intervals", ivs)
        object.__setattr__(self, "_starts", np.array([iv.start for iv in ivs], dtype=float))
        object.__setattr__(self, "_ends", np.array([iv.end for iv in ivs], dtype=float))
        object.__setattr__(self, "_levels", np.array([iv.level for iv in ivs], dtype=float))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tt = np.mod(t, self.period) if self.period else t
        idx = np.searchsorted(self._starts, tt, side="right") - 1
        safe = np.clip(idx, 0, max(len(self.intervals) - 1, 0))
        if len(self.intervals):
            inside = (idx >= 0) & (tt < self._ends[safe])
            val = np.where(inside, self._levels[safe], self.default_level)
        else:
            val = np.full(tt.shape, self.default_level)
        return val if t.ndim else float(val)

    def __eq__(self, other):
        return (isinstance(other, PiecewisePrior) and self.intervals == other.intervals
                and self.default_level == other.default_level and self.period == other.period)

    def to_dict(self):
        return {
            "type": "piecewise",
            "period": self.period,
            "default_level": self.default_level,
            "intervals": [{"start": iv.start, "end": iv.end, "level": iv.level} for iv in self.intervals],
        }


Prior = Union[ConstantPrior, FourierPrior, PiecewisePrior]


def eval_prior(prior: Prior, t: float) -> float:
    """f(t): probability that the emergence model governs at time t."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("prior is defined for t >= 0")
    return prior(t)


def prior_from_dict(data: dict) -> Prior:
    kind = data.get("type")
    if kind is None:
        kind = "fourier" if "terms" in data else "piecewise" if "intervals" in data else "constant"
    if kind == "constant":
        return ConstantPrior(float(data["level"]))
    if kind == "fourier":
        return FourierPrior(float(data["dc"]), tuple(
            FourierTerm(float(t["omega"]), float(t["amplitude"]), float(t["phase"])) for t in data["terms"]))
    if kind == "piecewise":
        period = data.get("period")
        return PiecewisePrior(
            tuple(Interval(float(i["start"]), float(i["end"]), float(i.get("level", 1.0))) for i in data["intervals"]),
            float(data.get("default_level", 0.0)),
            None if period is None else float(period),
        )
    raise ValueError(f"unknown prior type {kind!r}")


def load_prior(path) -> Prior:
    with open(path) as fh:
        return prior_from_dict(json.load(fh))


def save_prior(prior: Prior, path):
    with open(path, "w") as fh:
        json.dump(prior.to_dict(), fh, indent=1)


_SLOT = re.compile(r"^\s*(Mon|Tue|Wed|Thu|Fri|Sat|Sun)\s*:\s*(\d{1,2}):(\d{2})\s*$")


def _slot_seconds(text: str) -> float:
    m = _SLOT.match(text)
    if not m:
        raise ValueError(f"cannot parse schedule slot {text!r}; expected e.g. 'Mon: 19:00'")
    day, hh, mm = DAYS.index(m.group(1)), int(m.group(2)), int(m.group(3))
    if hh > 24 or mm > 59 or (hh == 24 and mm):
        raise ValueError(f"invalid time of day in {text!r}")
    return day * DAY_S + hh * 3600.0 + mm * 60.0


def parse_weekly_schedule(entries: Sequence[str] | str, level: float = 1.0, default_level: float = 0.0) -> PiecewisePrior:
    """Convert ``['Mon: 19:00 - Mon: 19:30', ...]`` strings to a weekly prior in seconds.

    Week time 0 is Monday 00:00. Slots running past Sunday midnight wrap.
    """
    if isinstance(entries, str):
        entries = ast.literal_eval(entries)
    pieces = []
    for entry in entries:
        try:
            left, right = entry.split(" - ")
        except ValueError:
            raise ValueError(f"cannot parse schedule entry {entry!r}") from None
        a, b = _slot_seconds(left), _slot_seconds(right)
        if a == b:
            continue
        if b > a:
            pieces.append([a, b])
        else:
            pieces += [[a, WEEK_S], [0.0, b]]
    pieces.sort()
    merged: list[list[float]] = []
    for a, b in pieces:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return PiecewisePrior(tuple(Interval(a, b, level) for a, b in merged), default_level, WEEK_S)


# ---------------------------------------------------------------------------
# spectral prior fitting


@dataclass(frozen=True)
class PriorTrainingSeries:
    timestamps: np.ndarray
    values: np.ndarray
    sampling_step: float | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        vs = np.asarray(self.values, dtype=float)
        if ts.shape != vs.shape:
            raise ValueError("timestamps and values differ in length")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)
        if self.sampling_step is None:
            step = float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0
            object.__setattr__(self, "sampling_step", step)

    @property
    def span(self) -> float:
        if len(self.timestamps) == 0:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0] + self.sampling_step)


def _mae(pred, truth) -> float:
    return float(np.mean(np.abs(pred - truth)))


def fourier_spectrum(series: PriorTrainingSeries, n_candidates: int):
    """Candidate harmonics of the training span with their amplitudes and phases."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate frequency")
    if len(series.timestamps) < 4 or series.span <= 0:
        raise ValueError("training series too short to fit a spectral prior")
    ts, xs = series.timestamps, series.values
    # harmonics above the sampling Nyquist limit alias onto lower ones
    nyquist = int(series.span // (2 * series.sampling_step))
    count = min(n_candidates, nyquist)
    if count < 1:
        raise ValueError("training span too short for any candidate frequency")
    omegas = 2 * np.pi * np.arange(1, count + 1) / series.span
    centred = xs - xs.mean()
    arg = np.multiply.outer(omegas, ts)
    a = 2.0 / len(ts) * (np.cos(arg) @ centred)
    b = 2.0 / len(ts) * (np.sin(arg) @ centred)
    return omegas, np.hypot(a, b), np.arctan2(b, a)


def fit_fourier_prior(
    series: PriorTrainingSeries,
    n_candidates: int = 1000,
    validation: PriorTrainingSeries | None = None,
    tol: float = 1e-12,
) -> FourierPrior:
    """Fit candidate harmonics on ``series``, then greedily keep the strongest
    ones while the saturated reconstruction keeps lowering validation MAE."""
    omegas, amps, phases = fourier_spectrum(series, n_candidates)
    dc = float(series.values.mean())
    if validation is None or len(validation.timestamps) == 0:
        validation = series
    vt, vx = validation.timestamps, validation.values

    order = np.argsort(-amps, kind="stable")
    current = np.full(vt.shape, dc)
    best = _mae(np.clip(current, 0, 1), vx)
    chosen = []
    for j in order:
        if amps[j] <= 0:
            break
        trial = current + amps[j] * np.cos(omegas[j] * vt - phases[j])
        score = _mae(np.clip(trial, 0, 1), vx)
        if score >= best - tol:
            break
        current, best = trial, score
        chosen.append(FourierTerm(float(omegas[j]), float(amps[j]), float(phases[j])))
    return FourierPrior(dc, tuple(chosen))


# ---------------------------------------------------------------------------
# paired estimator with annealed model selection


@dataclass(frozen=True, eq=False)
class Estimator:
    """Persistence + emergence filters and the model-selection state.

    With ``restart_below`` set, a phase flag tracks which regime the data
    are in. While in the presence phase, the persistence filter's presence
    belief dropping below the level ends the phase and restarts the
    emergence filter's survival clock at that observation; the emergence
    filter's presence belief rising above the level flips back and restarts
    the persistence filter. Model selection then compares the two filters on
    the same data: each evidence is taken relative to its value just before
    the last restart (``*_offset``). ``None`` never restarts.
    """

    alpha0: float
    prior: Prior
    persistence: FilterState
    emergence: FilterState
    restart_below: float | None = None
    refresh_after: int | None = None
    phase: ModelKind = ModelKind.PERSISTENCE
    persistence_offset: float = 0.0
    emergence_offset: float = 0.0

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if self.persistence.kind is not ModelKind.PERSISTENCE or self.emergence.kind is not ModelKind.EMERGENCE:
            raise ValueError("filters are in the wrong slots")
        if self.restart_below is not None and not 0 < self.restart_below < 1:
            raise ValueError("restart_below must lie in (0, 1)")
        object.__setattr__(self, "phase", ModelKind(self.phase))

    @property
    def last_time(self) -> float:
        return max(self.persistence.last_time, self.emergence.last_time)

    @property
    def count(self) -> int:
        return max(self.persistence.count, self.emergence.count)

    def model_log_evidence(self) -> tuple[float, float]:
        """(emergence, persistence) log-evidence of the data since the last restart."""
        return (self.emergence.log_evidence() - self.emergence_offset,
                self.persistence.log_evidence() - self.persistence_offset)

    def same_as(self, other: Estimator) -> bool:
        return (
            self.alpha0 == other.alpha0
            and self.prior == other.prior
            and self.restart_below == other.restart_below
            and self.refresh_after == other.refresh_after
            and self.phase is other.phase
            and self.persistence_offset == other.persistence_offset
            and self.emergence_offset == other.emergence_offset
            and self.persistence.same_as(other.persistence)
            and self.emergence.same_as(other.emergence)
        )

    def to_dict(self) -> dict:
        return {
            "schema": "estimator_v1",
            "alpha0": self.alpha0,
            "restart_below": self.restart_below,
            "refresh_after": self.refresh_after,
            "phase": self.phase.value,
            "persistence_offset": self.persistence_offset,
            "emergence_offset": self.emergence_offset,
            "prior": self.prior.to_dict(),
            "persistence": self.persistence.to_dict(),
            "emergence": self.emergence.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Estimator:
        if data.get("schema") != "estimator_v1":
            raise ValueError(f"expected schema 'estimator_v1', got {data.get('schema')!r}")
        return cls(
            alpha0=float(data["alpha0"]),
            prior=prior_from_dict(data["prior"]),
            persistence=FilterState.from_dict(data["persistence"]),
            emergence=FilterState.from_dict(data["emergence"]),
            restart_below=data.get("restart_below"),
            refresh_after=data.get("refresh_after"),
            phase=ModelKind(data.get("phase", "persistence")),
            persistence_offset=float(data.get("persistence_offset", 0.0)),
            emergence_offset=float(data.get("emergence_offset", 0.0)),
        )


SelectorState = Estimator


@dataclass(frozen=True)
class EstimatorTemplate:
    """Everything needed to spawn a fresh estimator (e.g. for a new graph edge)."""

    persistence_mixture: SurvivalMixture
    emergence_mixture: SurvivalMixture
    noise: NoiseModel
    prior: Prior = ConstantPrior(0.5)
    forgetting: float = 0.99
    alpha0: float = 0.01
    restart_below: float | None = None
    refresh_after: int | None = None

    def create(self, origin: float = 0.0) -> Estimator:
        return Estimator(
            alpha0=self.alpha0,
            prior=self.prior,
            persistence=pf.init_filter(self.persistence_mixture, self.noise, self.forgetting,
                                       ModelKind.PERSISTENCE, origin),
            emergence=pf.init_filter(self.emergence_mixture, self.noise, self.forgetting,
                                     ModelKind.EMERGENCE, origin),
            restart_below=self.restart_below,
            refresh_after=self.refresh_after,
        )

    def to_dict(self) -> dict:
        return {
            "persistence_mixture": self.persistence_mixture.to_dict(),
            "emergence_mixture": self.emergence_mixture.to_dict(),
            "noise": {"p_miss": self.noise.p_miss, "p_false": self.noise.p_false},
            "prior": self.prior.to_dict(),
            "forgetting": self.forgetting,
            "alpha0": self.alpha0,
            "restart_below": self.restart_below,
            "refresh_after": self.refresh_after,
        }

    @classmethod
    def from_dict(cls, data: dict) -> EstimatorTemplate:
        return cls(
            persistence_mixture=SurvivalMixture.from_dict(data["persistence_mixture"]),
            emergence_mixture=SurvivalMixture.from_dict(data["emergence_mixture"]),
            noise=NoiseModel(**data["noise"]),
            prior=prior_from_dict(data["prior"]),
            forgetting=float(data["forgetting"]),
            alpha0=float(data["alpha0"]),
            restart_below=data.get("restart_below"),
            refresh_after=data.get("refresh_after"),
        )


def _restarted(state: FilterState, obs: Observation) -> FilterState:
    fresh = pf.init_filter(state.mixture, state.noise, state.forgetting, state.kind, obs.time)
    return pf.update(fresh, obs)


def joint_update(sel: Estimator, obs: Observation) -> Estimator:
    """Feed one observation to both the persistence and the emergence filter."""
    if obs.time < sel.last_time:
        raise ValueError(f"out-of-order observation at t={obs.time} (last update t={sel.last_time})")
    pers = pf.update(sel.persistence, obs)
    emer = pf.update(sel.emergence, obs)
    out = replace(sel, persistence=pers, emergence=emer)
    thr = sel.restart_below
    if thr is None:
        return out
    if sel.phase is ModelKind.PERSISTENCE:
        flip = pf.presence_belief(pers, obs.time) < thr
        if flip or (sel.refresh_after and emer.count > sel.refresh_after):
            return replace(out, emergence=_restarted(sel.emergence, obs),
                           phase=ModelKind.EMERGENCE if flip else sel.phase,
                           persistence_offset=sel.persistence.log_evidence(), emergence_offset=0.0)
    else:
        flip = pf.presence_belief(emer, obs.time) > thr
        if flip or (sel.refresh_after and pers.count > sel.refresh_after):
            return replace(out, persistence=_restarted(sel.persistence, obs),
                           phase=ModelKind.PERSISTENCE if flip else sel.phase,
                           emergence_offset=sel.emergence.log_evidence(), persistence_offset=0.0)
    return out


def model_posterior(sel: Estimator, t: float) -> tuple[float, float]:
    """(p(emergence | Y), p(persistence | Y)) at query time t."""
    t_n = sel.last_time
    if t < t_n:
        raise ValueError(f"query at t={t} precedes the last update t={t_n}")
    odds = log_posterior_odds(sel, t)
    # logistic of the log-odds; stable for large gaps
    if odds >= 0:
        p_e = 1.0 / (1.0 + math.exp(-odds))
        return p_e, 1.0 - p_e
    p_p = 1.0 / (1.0 + math.exp(odds))
    return 1.0 - p_p, p_p


def log_posterior_odds(sel: Estimator, t: float) -> float:
    """log p(emergence | Y) - log p(persistence | Y)."""
    t_n = sel.last_time
    if t < t_n:
        raise ValueError(f"query at t={t} precedes the last update t={t_n}")
    alpha = math.exp(-sel.alpha0 * (t - t_n))
    f = min(max(float(eval_prior(sel.prior, t)), PRIOR_EPS), 1 - PRIOR_EPS)
    log_e, log_p = sel.model_log_evidence()
    return alpha * (log_e - log_p) + math.log(f) - math.log1p(-f)


def select_and_predict(sel: Estimator, t: float) -> float:
    """P(feature present at t | Y): model-posterior-weighted mix of the two filters."""
    p_e, p_p = model_posterior(sel, t)
    belief_e = pf.presence_belief(sel.emergence, t)
    belief_p = pf.presence_belief(sel.persistence, t)
    return min(max(p_e * belief_e + p_p * belief_p, 0.0), 1.0)
