"""Mixture-of-persistence-filters recursion and its emergence mirror.

All quantities are kept in log space. A filter's survival clock starts at
``origin``; the persistence filter tracks "still present", the emergence
filter tracks "still absent" over complemented observations.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .survival import SurvivalMixture

SCHEMA = "filter_state_v1"


class ModelKind(str, Enum):
    PERSISTENCE = "persistence"
    EMERGENCE = "emergence"


@dataclass(frozen=True)
class NoiseModel:
    p_miss: float  # P(y=0 | present)
    p_false: float  # P(y=1 | absent)

    def __post_init__(self):
        if not (0 <= self.p_miss <= 1 and 0 <= self.p_false <= 1):
            raise ValueError("noise rates must lie in [0, 1]")
        if self.p_miss + self.p_false >= 1:
            raise ValueError("p_miss + p_false must be < 1 for an informative detector")

    def swapped(self) -> NoiseModel:
        return NoiseModel(self.p_false, self.p_miss)


@dataclass(frozen=True)
class Observation:
    time: float
    value: int

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("observation time must be non-negative")
        if self.value not in (0, 1):
            raise ValueError(f"observation value must be 0 or 1, got {self.value!r}")


class ClampCounter:
    """Counts posteriors pushed back into [0, 1]; a numerical health metric."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_events = ClampCounter()


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


@dataclass(frozen=True, eq=False)
class FilterState:
    mixture: SurvivalMixture
    noise: NoiseModel
    kind: ModelKind
    forgetting: float
    origin: float
    last_time: float
    count: int
    log_likelihood: float
    log_accumulators: np.ndarray
    log_cond_evidence: np.ndarray
    log_weights: np.ndarray

    @property
    def internal_noise(self) -> NoiseModel:
        return self.noise if self.kind is ModelKind.PERSISTENCE else self.noise.swapped()

    def log_evidence(self) -> float:
        """log p(Y | model): the normaliser of the component weights."""
        return float(_logsumexp(self.log_cond_evidence + self.mixture.log_weights))

    def dominant_index(self) -> int:
        return int(np.argmax(self.log_weights))

    def same_as(self, other: FilterState) -> bool:
        """Bit-for-bit equality of every field."""
        return (
            self.mixture == other.mixture
            and self.noise == other.noise
            and self.kind is other.kind
            and self.forgetting == other.forgetting
            and self.origin == other.origin
            and self.last_time == other.last_time
            and self.count == other.count
            and _same_float(self.log_likelihood, other.log_likelihood)
            and _same_array(self.log_accumulators, other.log_accumulators)
            and _same_array(self.log_cond_evidence, other.log_cond_evidence)
            and _same_array(self.log_weights, other.log_weights)
        )

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "kind": self.kind.value,
            "mixture": self.mixture.to_dict(),
            "noise": {"p_miss": self.noise.p_miss, "p_false": self.noise.p_false},
            "forgetting": self.forgetting,
            "origin": self.origin,
            "last_time": self.last_time,
            "count": self.count,
            "log_likelihood": _enc(self.log_likelihood),
            "log_accumulators": [_enc(x) for x in self.log_accumulators],
            "log_cond_evidence": [_enc(x) for x in self.log_cond_evidence],
            "log_weights": [_enc(x) for x in self.log_weights],
        }

    @classmethod
    def from_dict(cls, data: dict) -> FilterState:
        if data.get("schema") != SCHEMA:
            raise ValueError(f"expected schema {SCHEMA!r}, got {data.get('schema')!r}")
        return cls(
            mixture=SurvivalMixture.from_dict(data["mixture"]),
            noise=NoiseModel(**data["noise"]),
            kind=ModelKind(data["kind"]),
            forgetting=float(data["forgetting"]),
            origin=float(data["origin"]),
            last_time=float(data["last_time"]),
            count=int(data["count"]),
            log_likelihood=_dec(data["log_likelihood"]),
            log_accumulators=np.array([_dec(x) for x in data["log_accumulators"]]),
            log_cond_evidence=np.array([_dec(x) for x in data["log_cond_evidence"]]),
            log_weights=np.array([_dec(x) for x in data["log_weights"]]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> FilterState:
        return cls.from_dict(json.loads(text))


# JSON has no -inf; an empty accumulator is stored as null
def _enc(x: float):
    return None if x == -math.inf else float(x)


def _dec(x) -> float:
    return -math.inf if x is None else float(x)


def _same_float(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(a - m))))


def init_filter(
    mixture: SurvivalMixture,
    noise: NoiseModel,
    forgetting: float = 1.0,
    kind: ModelKind | str = ModelKind.PERSISTENCE,
    origin: float = 0.0,
) -> FilterState:
    """Filter with no data: the posterior equals the survival prior."""
    if not 0 <= forgetting <= 1:
        raise ValueError(f"forgetting factor must lie in [0, 1], got {forgetting}")
    L = mixture.n_components
    return FilterState(
        mixture=mixture,
        noise=noise,
        kind=ModelKind(kind),
        forgetting=float(forgetting),
        origin=float(origin),
        last_time=float(origin),
        count=0,
        log_likelihood=0.0,
        log_accumulators=np.full(L, -np.inf),
        log_cond_evidence=np.zeros(L),
        log_weights=mixture.log_weights.copy(),
    )


def update(state: FilterState, obs: Observation) -> FilterState:
    """Fold one detector output into the filter and return the new state."""
    if obs.time < state.last_time:
        raise ValueError(f"out-of-order observation at t={obs.time} (last update t={state.last_time})")
    y = obs.value if state.kind is ModelKind.PERSISTENCE else 1 - obs.value
    noise = state.internal_noise
    mix = state.mixture

    t_prev = state.last_time - state.origin
    t_new = obs.time - state.origin
    log_if_absent = _log(noise.p_false) if y else _log(1 - noise.p_false)
    log_if_present = _log(1 - noise.p_miss) if y else _log(noise.p_miss)

    # survival time fell inside (t_prev, t_new]: earlier data saw the feature, this one does not
    with np.errstate(invalid="ignore"):
        log_acc = log_if_absent + np.logaddexp(
            state.log_accumulators, state.log_likelihood + mix.log_cdf_increment(t_prev, t_new)
        )
        log_lik = state.forgetting * state.log_likelihood + log_if_present
        log_ev = np.logaddexp(log_acc, log_lik + mix.log_survival(t_new))
    joint = log_ev + mix.log_weights
    log_w = joint - _logsumexp(joint)

    return replace(
        state,
        last_time=float(obs.time),
        count=state.count + 1,
        log_likelihood=float(log_lik),
        log_accumulators=log_acc,
        log_cond_evidence=log_ev,
        log_weights=log_w,
    )


def run(state: FilterState, observations) -> FilterState:
    for obs in observations:
        state = update(state, obs)
    return state


def log_conditional_posterior(state: FilterState, t: float) -> np.ndarray:
    """Unclamped log p(x_t | c_l, Y) for every component (internal state)."""
    return state.log_likelihood + state.mixture.log_survival(t - state.origin) - state.log_cond_evidence


def conditional_posterior(state: FilterState, component_index: int, t: float) -> float:
    """p(internal state holds at t | component, data), clamped to [0, 1]."""
    if t < state.last_time:
        raise ValueError(f"query at t={t} precedes the last update t={state.last_time}")
    if not 0 <= component_index < state.mixture.n_components:
        raise IndexError(f"component {component_index} out of range")
    value = math.exp(float(log_conditional_posterior(state, t)[component_index]))
    if value > 1.0 or value < 0.0 or math.isnan(value):
        clamp_events.count += 1
        value = 0.0 if math.isnan(value) else min(max(value, 0.0), 1.0)
    return value


def dominant_prediction(state: FilterState, t: float) -> float:
    """Conditional posterior of the highest-weight component (lowest index on ties)."""
    return conditional_posterior(state, state.dominant_index(), t)


def marginal_prediction(state: FilterState, t: float) -> float:
    """Weight-averaged posterior over all components."""
    if t < state.last_time:
        raise ValueError(f"query at t={t} precedes the last update t={state.last_time}")
    w = np.exp(state.log_weights)
    post = np.clip(np.exp(log_conditional_posterior(state, t)), 0.0, 1.0)
    return float(np.clip(np.dot(w, post), 0.0, 1.0))


def as_presence_belief(kind: ModelKind | str, raw: float) -> float:
    if not 0 <= raw <= 1:
        raise ValueError(f"belief must lie in [0, 1], got {raw}")
    return raw if ModelKind(kind) is ModelKind.PERSISTENCE else 1.0 - raw


def presence_belief(state: FilterState, t: float) -> float:
    """Dominant-component prediction expressed as P(feature present at t)."""
    return as_presence_belief(state.kind, dominant_prediction(state, t))
