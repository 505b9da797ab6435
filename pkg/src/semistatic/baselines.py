"""Evaluation metrics and the two reference predictors (prior-only and heuristic switching)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import filter as pf
from .filter import FilterState, ModelKind, Observation
from .switching import Prior, eval_prior


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    balanced_accuracy: float
    f1: float
    n: int
    threshold: float
    # classes absent from the truth; their recall is taken as 1
    zero_support: tuple[int, ...] = ()
    f1_undefined: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_support"] = list(self.zero_support)
        return d


def confusion(predicted, truth, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) of beliefs thresholded with ``belief >= threshold`` as positive."""
    p = np.asarray(predicted, dtype=float) >= threshold
    y = np.asarray(truth).astype(bool)
    return int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y))


def evaluate(predicted: Sequence[float], truth: Sequence[int], threshold: float = 0.5) -> MetricsReport:
    pred = np.asarray(predicted, dtype=float)
    y = np.asarray(truth)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {y.shape} labels")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if np.any((pred < 0) | (pred > 1)):
        raise ValueError("beliefs must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    tp, fp, tn, fn = confusion(pred, y, threshold)
    zero = []
    recalls = []
    for cls, hit, miss in ((0, tn, fp), (1, tp, fn)):
        if hit + miss == 0:
            zero.append(cls)
            recalls.append(1.0)
        else:
            recalls.append(hit / (hit + miss))
    undefined = (2 * tp + fp + fn) == 0
    f1 = 1.0 if undefined else 2 * tp / (2 * tp + fp + fn)
    return MetricsReport(
        mae=float(np.mean(np.abs(pred - y))),
        balanced_accuracy=float(np.mean(recalls)),
        f1=float(f1),
        n=int(pred.size),
        threshold=float(threshold),
        zero_support=tuple(zero),
        f1_undefined=bool(undefined),
    )


def fremen_baseline(prior: Prior, t):
    """The switching prior used directly as the presence forecast."""
    return eval_prior(prior, t)


# ---------------------------------------------------------------------------
# heuristic state machine over one persistence and one emergence filter


@dataclass(frozen=True, eq=False)
class PerpetuaBaseline:
    """Two filters, one active at a time, swapped by a belief threshold.

    Only the active filter consumes observations. When the active
    persistence filter's belief drops below ``threshold`` the emergence
    filter takes over (fresh, its clock starting at that observation); an
    active emergence filter whose presence belief rises above the threshold
    hands back to a fresh persistence filter.
    """

    persistence: FilterState
    emergence: FilterState
    active: ModelKind = ModelKind.PERSISTENCE
    threshold: float = 0.5
    switches: int = 0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("switch threshold must lie in (0, 1)")

    @property
    def active_filter(self) -> FilterState:
        return self.persistence if self.active is ModelKind.PERSISTENCE else self.emergence

    @property
    def last_time(self) -> float:
        return max(self.persistence.last_time, self.emergence.last_time)

    def update(self, obs: Observation) -> PerpetuaBaseline:
        if obs.time < self.last_time:
            raise ValueError(f"out-of-order observation at t={obs.time} (last update t={self.last_time})")
        state = pf.update(self.active_filter, obs)
        belief = pf.presence_belief(state, obs.time)
        if self.active is ModelKind.PERSISTENCE:
            if belief < self.threshold:
                fresh = _restart(self.emergence, obs.time)
                return replace(self, persistence=state, emergence=fresh, active=ModelKind.EMERGENCE,
                               switches=self.switches + 1)
            return replace(self, persistence=state)
        if belief > self.threshold:
            fresh = _restart(self.persistence, obs.time)
            return replace(self, persistence=fresh, emergence=state, active=ModelKind.PERSISTENCE,
                           switches=self.switches + 1)
        return replace(self, emergence=state)

    def predict(self, t: float) -> float:
        if t < self.last_time:
            raise ValueError(f"query at t={t} precedes the last update t={self.last_time}")
        return pf.presence_belief(self.active_filter, t)


def _restart(state: FilterState, origin: float) -> FilterState:
    return pf.init_filter(state.mixture, state.noise, state.forgetting, state.kind, origin)


def perpetua_baseline(persistence: FilterState, emergence: FilterState, switch_threshold: float = 0.5,
                      observations: Sequence[Observation] = (), t: float | None = None,
                      active: ModelKind = ModelKind.PERSISTENCE):
    """Run the state machine over ``observations``; return the belief at ``t`` (or the machine)."""
    machine = PerpetuaBaseline(persistence, emergence, ModelKind(active), switch_threshold)
    for obs in observations:
        machine = machine.update(obs)
    return machine if t is None else machine.predict(t)


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class SummaryRow:
    method: str
    mae: tuple[float, float]
    balanced_accuracy: tuple[float, float]
    f1: tuple[float, float]
    seeds: int


def summarize(method: str, reports: Sequence[MetricsReport]) -> SummaryRow:
    """Mean and population std over seeds."""
    if not reports:
        raise ValueError("no reports to summarize")

    def ms(vals):
        a = np.asarray(vals, dtype=float)
        return float(a.mean()), float(a.std())

    return SummaryRow(method, ms([r.mae for r in reports]), ms([r.balanced_accuracy for r in reports]),
                      ms([r.f1 for r in reports]), len(reports))


def format_table(rows: Sequence[SummaryRow]) -> str:
    width = max([len("Method")] + [len(r.method) for r in rows])
    head = f"{'Method':<{width}}  {'MAE':>15}  {'B-Acc':>15}  {'F1':>15}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = [f"{m:.3f} ± {s:.3f}" for m, s in (r.mae, r.balanced_accuracy, r.f1)]
        lines.append(f"{r.method:<{width}}  " + "  ".join(f"{c:>15}" for c in cells))
    return "\n".join(lines)


def table_json(rows: Sequence[SummaryRow]) -> str:
    return json.dumps([
        {"method": r.method, "seeds": r.seeds,
         "mae": {"mean": r.mae[0], "std": r.mae[1]},
         "balanced_accuracy": {"mean": r.balanced_accuracy[0], "std": r.balanced_accuracy[1]},
         "f1": {"mean": r.f1[0], "std": r.f1[1]}}
        for r in rows
    ], indent=1)
