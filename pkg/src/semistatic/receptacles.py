"""Factorised object-location belief over candidate receptacles."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

from .filter import Observation
from .switching import Estimator, EstimatorTemplate, joint_update, select_and_predict

DEFAULT_DELTA = 0.2


@dataclass(frozen=True)
class LocationVerdict:
    best_receptacle: str | None
    belief: float
    per_receptacle: dict
    absent: bool
    threshold: float = DEFAULT_DELTA

    def to_dict(self) -> dict:
        return {
            "best_receptacle": self.best_receptacle,
            "belief": self.belief,
            "absent": self.absent,
            "threshold": self.threshold,
            "per_receptacle": dict(self.per_receptacle),
        }


def _ranked(beliefs: Mapping[str, float]) -> list[tuple[str, float]]:
    # descending belief; equal beliefs in lexicographic receptacle order
    return sorted(beliefs.items(), key=lambda kv: (-kv[1], kv[0]))


def verdict_from_beliefs(beliefs: Mapping[str, float], delta: float = DEFAULT_DELTA) -> LocationVerdict:
    if not beliefs:
        raise ValueError("no receptacle beliefs to choose from")
    best, value = _ranked(beliefs)[0]
    return LocationVerdict(best, float(value), dict(beliefs), value < delta, delta)


def joint_map(beliefs: Mapping[str, float]) -> str:
    """Single receptacle maximising the product-form joint belief with exactly one
    location present: p_k * prod_{k' != k} (1 - p_k'). Kept to check it agrees with
    the per-receptacle argmax."""
    best, best_score = None, -math.inf
    logs_absent = {k: math.log1p(-p) if p < 1 else -math.inf for k, p in beliefs.items()}
    for k in sorted(beliefs):
        p = beliefs[k]
        score = (math.log(p) if p > 0 else -math.inf) + sum(v for kk, v in logs_absent.items() if kk != k)
        if best is None or score > best_score:
            best, best_score = k, score
    return best


@dataclass
class ObjectTracker:
    """One estimator per candidate receptacle of a single object."""

    object_id: str
    estimators: dict = field(default_factory=dict)
    absence_threshold: float = DEFAULT_DELTA
    template: EstimatorTemplate | None = None
    templates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.absence_threshold < 1:
            raise ValueError("absence threshold must lie in (0, 1)")

    def _template_for(self, receptacle_id: str) -> EstimatorTemplate | None:
        return self.templates.get(receptacle_id, self.template)

    def ensure(self, receptacle_id: str, origin: float = 0.0) -> Estimator:
        est = self.estimators.get(receptacle_id)
        if est is None:
            tpl = self._template_for(receptacle_id)
            if tpl is None:
                raise KeyError(f"object {self.object_id!r} has no estimator or template for {receptacle_id!r}")
            est = tpl.create(origin)
            self.estimators[receptacle_id] = est
        return est

    def observe(self, receptacle_id: str, obs: Observation) -> ObjectTracker:
        """Update this receptacle's estimator only."""
        est = self.ensure(receptacle_id, origin=obs.time)
        self.estimators[receptacle_id] = joint_update(est, obs)
        return self

    def beliefs(self, t: float) -> dict:
        if not self.estimators:
            raise ValueError(f"object {self.object_id!r} has no receptacle estimators")
        return {k: select_and_predict(est, t) for k, est in self.estimators.items()}

    def locate(self, t: float) -> LocationVerdict:
        return verdict_from_beliefs(self.beliefs(t), self.absence_threshold)

    def top_k(self, t: float, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be at least 1")
        return _ranked(self.beliefs(t))[:k]

    def to_dict(self) -> dict:
        return {
            "schema": "tracker_v1",
            "object_id": self.object_id,
            "absence_threshold": self.absence_threshold,
            "template": None if self.template is None else self.template.to_dict(),
            "templates": {k: v.to_dict() for k, v in self.templates.items()},
            "estimators": {k: v.to_dict() for k, v in sorted(self.estimators.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> ObjectTracker:
        if data.get("schema") != "tracker_v1":
            raise ValueError(f"expected schema 'tracker_v1', got {data.get('schema')!r}")
        tpl = data.get("template")
        return cls(
            object_id=data["object_id"],
            estimators={k: Estimator.from_dict(v) for k, v in data["estimators"].items()},
            absence_threshold=float(data["absence_threshold"]),
            template=None if tpl is None else EstimatorTemplate.from_dict(tpl),
            templates={k: EstimatorTemplate.from_dict(v) for k, v in data.get("templates", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> ObjectTracker:
        return cls.from_dict(json.loads(text))


def observe(tracker: ObjectTracker, receptacle_id: str, obs: Observation) -> ObjectTracker:
    return tracker.observe(receptacle_id, obs)


def locate(tracker: ObjectTracker, t: float) -> LocationVerdict:
    return tracker.locate(t)


def top_k(tracker: ObjectTracker, t: float, k: int) -> list[tuple[str, float]]:
    return tracker.top_k(t, k)
