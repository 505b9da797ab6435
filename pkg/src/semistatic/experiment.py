"""Training and evaluation pipelines shared by the CLI and the acceptance tests.

Datasets are in seconds. Estimators and priors run on a coarser clock
(``time_unit`` seconds per unit) so that the annealing rate and the fitted
survival times are expressed in the same unit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import filter as pf
from .baselines import MetricsReport, PerpetuaBaseline, evaluate, fremen_baseline
from .filter import ModelKind, NoiseModel, Observation
from .simulator import (
    DAY_S, HOUR_S, WEEK_S, DatasetRow, FeatureData, WeeklySchedule, add_noise, feature_seed, generate_weekly, group_features,
    series_key,
)
from .survival import DurationSample, SurvivalMixture, extract_durations, fit_mixture
from .switching import (
    ConstantPrior, EstimatorTemplate, Interval, PiecewisePrior, Prior, PriorTrainingSeries, fit_fourier_prior,
    joint_update, log_posterior_odds, prior_from_dict, select_and_predict,
)

logger = logging.getLogger(__name__)

METHODS = ("perpetua_star_oracle", "perpetua_star_fremen", "perpetua_star_schedule", "perpetua", "fremen")
METHOD_LABELS = {
    "perpetua_star_oracle": "Perpetua* (Oracle)",
    "perpetua_star_fremen": "Perpetua* (FM)",
    "perpetua_star_schedule": "Perpetua* (Schedule)",
    "perpetua": "Perpetua",
    "fremen": "FreMEn",
}


@dataclass(frozen=True)
class TrainConfig:
    max_components: int = 5
    n_candidates: int = 1000
    forgetting: float = 0.99
    alpha0: float = 0.01
    time_unit: float = 60.0
    restart_below: float | None = 0.5
    refresh_after: int | None = 250
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.forgetting <= 1:
            raise ValueError("forgetting factor must lie in [0, 1]")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.time_unit > 0:
            raise ValueError("time_unit must be positive")


@dataclass(frozen=True)
class FeatureModel:
    feature_id: str
    receptacle_id: str
    persistence: SurvivalMixture
    emergence: SurvivalMixture
    priors: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return series_key(self.feature_id, self.receptacle_id)

    def template(self, noise: NoiseModel, prior: Prior, config: TrainConfig) -> EstimatorTemplate:
        return EstimatorTemplate(self.persistence, self.emergence, noise, prior, config.forgetting,
                                 config.alpha0, config.restart_below, config.refresh_after)

    def to_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "receptacle_id": self.receptacle_id,
            "persistence": self.persistence.to_dict(),
            "emergence": self.emergence.to_dict(),
            "priors": {k: p.to_dict() for k, p in self.priors.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> FeatureModel:
        return cls(
            data["feature_id"], data.get("receptacle_id", ""),
            SurvivalMixture.from_dict(data["persistence"]), SurvivalMixture.from_dict(data["emergence"]),
            {k: prior_from_dict(v) for k, v in data.get("priors", {}).items()},
        )


@dataclass(frozen=True)
class ModelBundle:
    config: TrainConfig
    noise: NoiseModel
    features: dict

    def to_dict(self) -> dict:
        return {
            "schema": "models_v1",
            "config": self.config.__dict__,
            "noise": {"p_miss": self.noise.p_miss, "p_false": self.noise.p_false},
            "features": [m.to_dict() for m in self.features.values()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModelBundle:
        if data.get("schema") != "models_v1":
            raise ValueError(f"expected schema 'models_v1', got {data.get('schema')!r}")
        feats = [FeatureModel.from_dict(d) for d in data["features"]]
        return cls(TrainConfig(**data["config"]), NoiseModel(**data["noise"]), {m.key: m for m in feats})

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> ModelBundle:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# training


def estimate_noise(features: Iterable[FeatureData], floor: float = 1e-3) -> NoiseModel:
    """Pooled detector error rates from ground truth vs. detections (masked cells skipped)."""
    miss = hits = false = negatives = 0
    for f in features:
        seen = f.observed >= 0
        gt, obs = f.gt[seen], f.observed[seen]
        miss += int(np.sum((gt == 1) & (obs == 0)))
        hits += int(np.sum(gt == 1))
        false += int(np.sum((gt == 0) & (obs == 1)))
        negatives += int(np.sum(gt == 0))
    p_m = miss / hits if hits else floor
    p_f = false / negatives if negatives else floor
    return NoiseModel(min(max(p_m, floor), 0.49), min(max(p_f, floor), 0.49))


def fallback_mixture(samples: Sequence[DurationSample], span: float, step: float) -> SurvivalMixture:
    """Prior for a run kind EM cannot fit.

    Runs that were seen but never completed are taken to outlast the
    training span by a wide margin; a state never visited is taken to end
    within about one sampling step.
    """
    if samples:
        return SurvivalMixture.single(float(np.log(10 * span)), 1.0)
    return SurvivalMixture.single(float(np.log(step)), 1.0)


def fit_durations(samples: Sequence[DurationSample], span: float, step: float, config: TrainConfig) -> SurvivalMixture:
    if sum(1 for s in samples if not s.censored and s.duration > 0) < 2:
        return fallback_mixture(samples, span, step)
    return fit_mixture(samples, config.max_components, seed=config.seed)


def oracle_prior(schedule: WeeklySchedule, time_unit: float, tick: float = HOUR_S) -> PiecewisePrior:
    """Step prior reproducing the unshifted weekly schedule at the sampling ticks."""
    gt = generate_weekly(schedule, 1, tick)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], gt.values, [0]])))
    ivs = [Interval(gt.timestamps[0] + a * tick, gt.timestamps[0] + b * tick, 1.0)
           for a, b in zip(edges[::2], edges[1::2])]
    scaled = tuple(Interval(iv.start / time_unit, iv.end / time_unit, 1.0) for iv in ivs)
    return PiecewisePrior(scaled, 0.0, WEEK_S / time_unit)


def scale_prior(prior: PiecewisePrior, time_unit: float) -> PiecewisePrior:
    """Re-express a prior defined in seconds on the estimator clock."""
    return PiecewisePrior(tuple(Interval(iv.start / time_unit, iv.end / time_unit, iv.level) for iv in prior.intervals),
                          prior.default_level, None if prior.period is None else prior.period / time_unit)


def train_feature(train: FeatureData, val: FeatureData | None, config: TrainConfig,
                  schedule: WeeklySchedule | None = None, schedule_prior: PiecewisePrior | None = None) -> FeatureModel:
    """Fit survival mixtures on ground-truth runs of the training window (train + val)
    and a spectral prior on the training observations, selected on validation."""
    u = config.time_unit
    full = train if val is None or len(val.times) == 0 else _concat(train, val)
    if len(full.times) < 2:
        raise ValueError(f"feature {train.feature_id!r} has too little training data")
    t_units = full.times / u
    step = float(np.median(np.diff(t_units)))
    span = float(t_units[-1] - t_units[0] + step)
    pers = fit_durations(extract_durations(t_units, full.gt, "presence_runs"), span, step, config)
    emer = fit_durations(extract_durations(t_units, full.gt, "absence_runs"), span, step, config)

    obs = train.observations()
    val_series = None
    if val is not None and len(val.times):
        v = val.observations()
        val_series = PriorTrainingSeries(v.timestamps / u, v.values)
    priors: dict = {"fremen": fit_fourier_prior(PriorTrainingSeries(obs.timestamps / u, obs.values),
                                                config.n_candidates, val_series)}
    if schedule is not None:
        priors["oracle"] = oracle_prior(schedule, u, float(np.median(np.diff(train.times))))
    if schedule_prior is not None:
        priors["schedule"] = scale_prior(schedule_prior, u)
    return FeatureModel(train.feature_id, train.receptacle_id, pers, emer, priors)


def _concat(a: FeatureData, b: FeatureData) -> FeatureData:
    return FeatureData(a.feature_id, a.receptacle_id, np.concatenate([a.times, b.times]),
                       np.concatenate([a.gt, b.gt]), np.concatenate([a.observed, b.observed]))


def train_bundle(train: dict, val: dict | None, config: TrainConfig, schedules: dict | None = None,
                 schedule_priors: dict | None = None, noise: NoiseModel | None = None) -> ModelBundle:
    if not train:
        raise ValueError("no training features")
    if noise is None:
        noise = estimate_noise(list(train.values()) + list((val or {}).values()))
    feats = {}
    for fid, data in sorted(train.items()):
        feats[fid] = train_feature(data, (val or {}).get(fid), config, (schedules or {}).get(fid),
                                   (schedule_priors or {}).get(fid))
    return ModelBundle(config, noise, feats)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Trace:
    """Per-tick beliefs of one method on one feature."""

    times: np.ndarray
    gt: np.ndarray
    belief: np.ndarray
    prior: np.ndarray | None = None
    log_odds: np.ndarray | None = None


def _stream(test: FeatureData):
    """(time, observation-or-None) per tick; masked cells carry no observation."""
    for t, y in zip(test.times, test.observed):
        yield float(t), (int(y) if y >= 0 else None)


def run_perpetua_star(model: FeatureModel, bundle: ModelBundle, prior_name: str, warmup: FeatureData | None,
                      test: FeatureData, adapt: bool = True) -> Trace:
    u = bundle.config.time_unit
    prior = model.priors[prior_name]
    est = model.template(bundle.noise, prior, bundle.config).create(origin=0.0)
    if warmup is not None:
        w = warmup.observations()
        for t, y in zip(w.timestamps, w.values):
            est = joint_update(est, Observation(t / u, int(y)))
    beliefs, priors, odds = [], [], []
    for t, y in _stream(test):
        tu = t / u
        beliefs.append(select_and_predict(est, tu))
        priors.append(float(prior(tu)))
        odds.append(log_posterior_odds(est, tu))
        if adapt and y is not None:
            est = joint_update(est, Observation(tu, y))
    return Trace(test.times, test.gt, np.array(beliefs), np.array(priors), np.array(odds))


def run_perpetua(model: FeatureModel, bundle: ModelBundle, warmup: FeatureData | None, test: FeatureData,
                 adapt: bool = True, threshold: float = 0.5) -> Trace:
    u = bundle.config.time_unit
    cfg = bundle.config
    machine = PerpetuaBaseline(
        pf.init_filter(model.persistence, bundle.noise, cfg.forgetting, ModelKind.PERSISTENCE),
        pf.init_filter(model.emergence, bundle.noise, cfg.forgetting, ModelKind.EMERGENCE),
        threshold=threshold,
    )
    if warmup is not None:
        w = warmup.observations()
        for t, y in zip(w.timestamps, w.values):
            machine = machine.update(Observation(t / u, int(y)))
    beliefs = []
    for t, y in _stream(test):
        beliefs.append(machine.predict(t / u))
        if adapt and y is not None:
            machine = machine.update(Observation(t / u, y))
    return Trace(test.times, test.gt, np.array(beliefs))


def run_fremen(model: FeatureModel, bundle: ModelBundle, test: FeatureData) -> Trace:
    prior = model.priors["fremen"]
    belief = np.asarray(fremen_baseline(prior, test.times / bundle.config.time_unit), dtype=float)
    return Trace(test.times, test.gt, belief, belief)


def run_method(method: str, model: FeatureModel, bundle: ModelBundle, warmup: FeatureData | None,
               test: FeatureData, adapt: bool = True) -> Trace:
    if method == "fremen":
        return run_fremen(model, bundle, test)
    if method == "perpetua":
        return run_perpetua(model, bundle, warmup, test, adapt)
    if method.startswith("perpetua_star_"):
        name = method[len("perpetua_star_"):]
        if name not in model.priors:
            raise KeyError(f"feature {model.feature_id!r} has no {name!r} prior")
        return run_perpetua_star(model, bundle, name, warmup, test, adapt)
    raise KeyError(f"unknown method {method!r}")


def available_methods(bundle: ModelBundle) -> list[str]:
    present = set.intersection(*(set(m.priors) for m in bundle.features.values())) if bundle.features else set()
    return [m for m in METHODS if not m.startswith("perpetua_star_") or m[len("perpetua_star_"):] in present]


def evaluate_bundle(bundle: ModelBundle, warmup: dict | None, test: dict, methods: Sequence[str] | None = None,
                    adapt: bool = True, threshold: float = 0.5):
    """Score each method over all features pooled. Returns (reports, traces)."""
    methods = list(methods or available_methods(bundle))
    missing = sorted(set(test) - set(bundle.features))
    if missing:
        raise KeyError(f"no trained model for features {missing}")
    reports: dict[str, MetricsReport] = {}
    traces: dict[str, dict[str, Trace]] = {}
    for method in methods:
        traces[method] = {}
        for fid in sorted(test):
            traces[method][fid] = run_method(method, bundle.features[fid], bundle,
                                             (warmup or {}).get(fid), test[fid], adapt)
        belief = np.concatenate([tr.belief for tr in traces[method].values()])
        gt = np.concatenate([tr.gt for tr in traces[method].values()])
        reports[method] = evaluate(belief, gt, threshold)
    return reports, traces


# ---------------------------------------------------------------------------
# the long-weekend protocol


def protocol_schedules() -> list[WeeklySchedule]:
    """Four always-present features and four household-routine features."""
    static = [WeeklySchedule.daily(f"static_{i}", [(0, 24)], [(0, 24)], receptacle_id=f"shelf_{i}")
              for i in range(4)]
    routine = [
        # parent at home outside office hours; out for a few weekend hours
        WeeklySchedule.daily("coat", [(0, 7.5), (18, 24)], [(0, 10), (14, 24)], receptacle_id="hallway_hook"),
        # school bag at home outside school hours
        WeeklySchedule.daily("school_bag", [(0, 8), (17, 24)], [(0, 24)], receptacle_id="bedroom_desk"),
        # work laptop on the office desk during office hours only
        WeeklySchedule.daily("laptop", [(8, 18)], [], receptacle_id="office_desk"),
        # dishes in the rack after breakfast and dinner, longer weekend brunch
        WeeklySchedule.daily("dish_rack", [(7, 9), (19, 22)], [(10, 15), (19, 23)], receptacle_id="kitchen_counter"),
    ]
    return static + routine


@dataclass(frozen=True)
class ProtocolConfig:
    seed: int = 0
    weeks: tuple[int, int, int] = (3, 1, 1)
    tick: float = HOUR_S
    noise: NoiseModel = NoiseModel(0.1, 0.1)
    long_weekend: tuple[int, ...] = (0, 4)
    # hours of the day the robot observes during the test week; weekend unobserved
    test_hours: tuple[float, float] = (8.0, 20.0)
    test_days: tuple[int, ...] = (0, 1, 2, 3, 4)
    # train weeks shift weekend events by up to this many ticks
    weekend_jitter: int = 1


def _jittered(schedule: WeeklySchedule, rng: np.random.Generator, jitter_h: float) -> WeeklySchedule:
    if not schedule.weekend_intervals or jitter_h <= 0:
        return schedule
    out = []
    for a, b in schedule.weekend_intervals:
        a2 = a if a <= 0 else float(np.clip(a + rng.integers(-jitter_h, jitter_h + 1), 0, 23))
        b2 = b if b >= 24 else float(np.clip(b + rng.integers(-jitter_h, jitter_h + 1), a2 + 1, 24))
        out.append((a2, b2))
    return replace(schedule, weekend_intervals=tuple(out))


def protocol_dataset(config: ProtocolConfig, schedules: Sequence[WeeklySchedule] | None = None) -> list[DatasetRow]:
    """Rows for train + val weeks (fully observed, weekend jitter) and one shifted test week."""
    schedules = list(schedules or protocol_schedules())
    n_train = config.weeks[0] + config.weeks[1]
    rows: list[DatasetRow] = []
    for sched in schedules:
        rng = np.random.default_rng(feature_seed(config.seed, sched.feature_id))
        parts = []
        for week in range(n_train + config.weeks[2]):
            test = week >= n_train
            s = sched if test else _jittered(sched, rng, config.weekend_jitter * config.tick / HOUR_S)
            gt = generate_weekly(s, 1, config.tick, config.long_weekend if test else None, start=week * WEEK_S)
            parts.append((gt, test))
        for gt, test in parts:
            obs = add_noise(gt, config.noise, rng)
            visible = np.ones(len(gt), dtype=bool)
            if test:
                day = (np.mod(gt.timestamps, WEEK_S) // DAY_S).astype(int)
                hod = np.mod(gt.timestamps, DAY_S) / HOUR_S
                visible = (np.isin(day, config.test_days) & (hod >= config.test_hours[0])
                           & (hod <= config.test_hours[1]))
            for t, g, o, v in zip(gt.timestamps, gt.values, obs.values, visible):
                rows.append(DatasetRow(float(t), sched.feature_id, sched.receptacle_id, int(g), int(o) if v else -1))
    return rows


def split_features(features: dict, weeks: tuple[int, int, int], start: float = 0.0):
    edges = start + WEEK_S * np.cumsum([0, *weeks])
    return tuple({fid: f.window(edges[i], edges[i + 1]) for fid, f in features.items()} for i in range(3))


def run_protocol(config: ProtocolConfig, train_config: TrainConfig, methods: Sequence[str] | None = None,
                 adapt: bool = True):
    """Simulate, train and score one seed of the long-weekend protocol."""
    schedules = protocol_schedules()
    feats = group_features(protocol_dataset(config, schedules))
    train, val, test = split_features(feats, config.weeks)
    train_config = replace(train_config, seed=config.seed)
    bundle = train_bundle(train, val, train_config, {series_key(s.feature_id, s.receptacle_id): s for s in schedules})
    warmup = {fid: _concat(train[fid], val[fid]) for fid in train}
    methods = methods or ("perpetua_star_oracle", "perpetua_star_fremen", "perpetua", "fremen")
    return evaluate_bundle(bundle, warmup, test, methods, adapt)
