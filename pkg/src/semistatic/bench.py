"""Memory and timing scaling measurements."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass

import numpy as np

from .filter import NoiseModel, Observation
from .graph import Node, NodeKind, PredictiveGraph
from .survival import LogNormalComponent, SurvivalMixture
from .switching import EstimatorTemplate, FourierPrior, FourierTerm, joint_update, select_and_predict


def mixture_with(n_components: int, seed: int = 0) -> SurvivalMixture:
    # full-precision random parameters, so every number serialises at full width
    rng = np.random.default_rng(seed)
    comps = tuple(LogNormalComponent(float(rng.uniform(2, 8)), float(rng.uniform(0.5, 1.5)))
                  for _ in range(n_components))
    w = rng.uniform(1, 2, n_components)
    w = w / w.sum()
    w[-1] = 1.0 - float(np.sum(w[:-1]))
    return SurvivalMixture(comps, tuple(float(x) for x in w))


def fourier_with(n_terms: int, span: float = 10080.0) -> FourierPrior:
    rng = np.random.default_rng(n_terms)
    terms = tuple(FourierTerm(2 * np.pi * (j + 1) / span, float(rng.uniform(0, 0.1)), float(rng.uniform(-3, 3)))
                  for j in range(n_terms))
    return FourierPrior(0.5, terms)


def bench_template(n_components: int = 5, n_terms: int = 1000) -> EstimatorTemplate:
    mix = mixture_with(n_components)
    return EstimatorTemplate(mix, mix, NoiseModel(0.1, 0.1), fourier_with(n_terms), restart_below=0.5,
                             refresh_after=250)


def graph_with_edges(n_edges: int, template: EstimatorTemplate, receptacles_per_object: int = 4) -> PredictiveGraph:
    g = PredictiveGraph(template)
    n_objects = -(-n_edges // receptacles_per_object)
    for k in range(receptacles_per_object):
        g.add_node(Node.box(f"r{k}", NodeKind.RECEPTACLE, (float(k), 0.0, 0.0)))
    made = 0
    for j in range(n_objects):
        g.add_node(Node.box(f"o{j}", NodeKind.SEMI_STATIC, (0.0, float(j), 0.0)))
        for k in range(receptacles_per_object):
            if made == n_edges:
                break
            g._new_edge(f"o{j}", f"r{k}", 0.0)
            made += 1
    return g


def serialized_size(obj) -> int:
    return len(json.dumps(obj.to_dict()).encode())


def linear_fit(x, y) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of an ordinary least-squares line."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def size_vs_edges(edge_counts=(10, 50, 100, 250, 500, 750, 1000), template: EstimatorTemplate | None = None):
    template = template or bench_template()
    sizes = [serialized_size(graph_with_edges(n, template)) for n in edge_counts]
    return list(edge_counts), sizes


def size_vs_components(max_components: int = 5, n_terms: int = 0, updates: int = 20):
    """Serialized size of one estimator for L = 1..max_components, after a few
    updates so that no accumulator is still empty."""
    sizes = []
    for L in range(1, max_components + 1):
        est = bench_template(L, n_terms).create()
        for o in _observations(updates):
            est = joint_update(est, o)
        sizes.append(serialized_size(est))
    return list(range(1, max_components + 1)), sizes


def _observations(n: int, seed: int = 0, step: float = 60.0):
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, 2, n)
    return [Observation(float(i * step), int(y)) for i, y in enumerate(ys)]


def _time_call(fn, repeats: int) -> float:
    """Median wall time of ``fn()`` over ``repeats`` calls."""
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def update_timing(checkpoints=(10, 100, 1000, 10000, 100000), repeats: int = 200, n_terms: int = 0):
    """Median time of the k-th update for each checkpoint k.

    Updates are pure, so the k-th one is re-applied to the same state to
    get a stable timing without replaying the prefix.
    """
    tpl = bench_template(5, n_terms)
    obs = _observations(max(checkpoints) + 1)
    est = tpl.create()
    times = {}
    done = 0
    for k in sorted(checkpoints):
        while done < k - 1:
            est = joint_update(est, obs[done])
            done += 1
        state, o = est, obs[k - 1]
        times[k] = _time_call(lambda: joint_update(state, o), repeats)
    return times


def predict_timing(term_counts=(0, 10, 100, 1000), repeats: int = 200):
    out = {}
    for n in term_counts:
        est = bench_template(5, n).create()
        for o in _observations(20):
            est = joint_update(est, o)
        t = est.last_time + 600.0
        out[n] = _time_call(lambda: select_and_predict(est, t), repeats)
    return out


@dataclass
class BenchReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("measurement", "x", "value"))
        w.writerows(self.rows)
        return buf.getvalue()


def run_bench(quick: bool = False) -> tuple[BenchReport, dict]:
    edges, sizes = size_vs_edges((10, 100, 250, 500) if quick else (10, 50, 100, 250, 500, 750, 1000))
    slope, _, r2 = linear_fit(edges, sizes)
    comps, csizes = size_vs_components()
    # L=1 stores the exact constants weight 1.0 and log-weight 0.0, which print
    # short; marginal cost is measured from L=2 on where every number is full width
    per_component = list(np.diff(csizes[1:]))
    upd = update_timing((10, 1000, 10000) if quick else (10, 100, 1000, 10000, 100000))
    pred = predict_timing((0, 10, 100) if quick else (0, 10, 100, 1000))
    rows = [("size_bytes_vs_edges", n, s) for n, s in zip(edges, sizes)]
    rows += [("estimator_bytes_vs_components", L, s) for L, s in zip(comps, csizes)]
    rows += [("update_seconds_at_observation", k, v) for k, v in upd.items()]
    rows += [("predict_seconds_vs_fourier_terms", k, v) for k, v in pred.items()]
    first, last = min(upd), max(upd)
    summary = {
        "bytes_per_edge": slope,
        "size_r2": r2,
        "bytes_per_component": [int(x) for x in per_component],
        "update_ratio": upd[last] / upd[first],
        "update_ratio_between": [first, last],
    }
    return BenchReport(rows), summary
