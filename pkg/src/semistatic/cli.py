"""Command-line entry point: simulate | train | evaluate | query | ingest | bench.

Exit codes: 0 success, 1 internal error, 2 I/O or configuration error,
3 unknown object or feature.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .baselines import format_table, summarize, table_json
from .experiment import (
    METHOD_LABELS, METHODS, ModelBundle, ProtocolConfig, TrainConfig, _concat, available_methods, evaluate_bundle,
    protocol_dataset, protocol_schedules, split_features, train_bundle,
)
from .filter import NoiseModel
from .graph import Node, NodeKind, PredictiveGraph, SessionAssociation, Snapshot, associate_session
from .simulator import (
    DAY_NAMES, DatasetRow, HierarchicalSchedule, WeeklySchedule, add_noise, feature_seed, generate_hierarchical,
    group_features, parse_day, read_dataset, series_key, ObservationSeries, write_dataset,
)
from .switching import ConstantPrior, PiecewisePrior, parse_weekly_schedule, prior_from_dict

logger = logging.getLogger("semistatic")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_NOT_FOUND = 0, 1, 2, 3
DATASET = "dataset.csv"
GROUND_TRUTH = "ground_truth.json"
MODELS = "models.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument helpers


def _rate(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"{text} must be positive")
    return v


def _weeks(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}; expected e.g. 3,1,1") from None
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError(f"bad split {text!r}; expected three non-negative week counts")
    return parts


def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out += list(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _days(text: str) -> tuple[int, ...]:
    if text.lower() in ("", "none"):
        return ()
    return tuple(parse_day(d) for d in text.split(","))


def _hours(text: str) -> tuple[float, float]:
    a, b = text.split("-")
    return float(a), float(b)


def _optional_rate(text: str) -> float | None:
    return None if text.lower() == "none" else _rate(text)


def _optional_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _seed_dirs(runs: Path) -> list[Path]:
    dirs = sorted((p for p in runs.glob("seed_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise CliError(f"no seed_* directories under {runs}")
    return dirs


# ---------------------------------------------------------------------------
# simulate


def _hierarchical_rows(objects: list, weeks: int, tick: float, noise: NoiseModel, seed: int) -> list[DatasetRow]:
    rows = []
    for spec in objects:
        oid = str(spec["object_id"])
        sched = HierarchicalSchedule.from_dict(spec["schedule"])
        rng = np.random.default_rng(feature_seed(seed, oid))
        ts, idx = generate_hierarchical(sched, weeks, tick, rng)
        for k, rec in enumerate(sched.receptacles):
            if k == sched.absent:
                continue
            gt = (idx == k).astype(int)
            obs = add_noise(ObservationSeries(ts, gt, oid), noise, rng).values
            rows += [DatasetRow(float(t), oid, rec, int(g), int(o)) for t, g, o in zip(ts, gt, obs)]
    return rows


def _simulate_one(args, seed: int, out: Path, config: dict | None):
    pc = ProtocolConfig(seed=seed, weeks=args.weeks, tick=args.tick_hours * 3600.0,
                        noise=NoiseModel(args.p_miss, args.p_false), long_weekend=args.long_weekend,
                        test_hours=args.test_hours, weekend_jitter=args.weekend_jitter)
    truth: dict = {"seed": seed, "weeks": list(args.weeks), "tick_s": pc.tick,
                   "noise": {"p_miss": args.p_miss, "p_false": args.p_false},
                   "long_weekend": [DAY_NAMES[d] for d in args.long_weekend]}
    if config is not None and "hierarchical" in config:
        rows = _hierarchical_rows(config["hierarchical"], sum(args.weeks), pc.tick, pc.noise, seed)
        truth["hierarchical"] = config["hierarchical"]
    else:
        items = None if config is None else (config["features"] if isinstance(config, dict) else config)
        schedules = protocol_schedules() if items is None else [WeeklySchedule.from_dict(d) for d in items]
        if not schedules:
            raise CliError("schedule config lists no features")
        rows = protocol_dataset(pc, schedules)
        truth["features"] = [s.to_dict() for s in schedules]
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / DATASET, rows)
    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    for key, feat in sorted(group_features(rows).items()):
        write_dataset(series_dir / f"{key.replace('|', '__')}.csv",
                      (DatasetRow(float(t), feat.feature_id, feat.receptacle_id, int(g), int(o))
                       for t, g, o in zip(feat.times, feat.gt, feat.observed)))
    with open(out / GROUND_TRUTH, "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return len(group_features(rows))


def cmd_simulate(args) -> int:
    if sum(args.weeks) <= 0:
        raise CliError("simulation span is zero weeks")
    config = _read_json(args.config) if args.config else None
    out = Path(args.out)
    seeds = args.seeds or [args.seed]
    for seed in seeds:
        target = out / f"seed_{seed}" if args.seeds else out
        n = _simulate_one(args, seed, target, config)
        print(f"seed {seed}: {n} series -> {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _schedule_priors(path) -> dict:
    """JSON object mapping series key to a list of "Day: hh:mm - Day: hh:mm" slots or a prior dict."""
    data = _read_json(path)
    out = {}
    for key, value in data.items():
        prior = prior_from_dict(value) if isinstance(value, dict) else parse_weekly_schedule(value)
        if not isinstance(prior, PiecewisePrior):
            raise CliError(f"schedule prior for {key!r} must be piecewise")
        out[key] = prior
    return out


def _train_config(args) -> TrainConfig:
    return TrainConfig(max_components=args.max_components, n_candidates=args.candidates, forgetting=args.gamma,
                       alpha0=args.alpha0, time_unit=args.time_unit, restart_below=args.restart_below,
                       refresh_after=args.refresh_after, seed=args.seed)


def _load_features(path) -> dict:
    try:
        rows = read_dataset(path)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    if not rows:
        raise CliError(f"{path}: no data rows")
    return group_features(rows)


def _train_one(args, data_path: Path, truth_path: Path | None, out: Path, seed: int) -> ModelBundle:
    feats = _load_features(data_path)
    train, val, _ = split_features(feats, args.split, args.start)
    train = {k: v for k, v in train.items() if len(v.times)}
    if not train:
        raise CliError(f"{data_path}: no rows inside the training weeks")
    schedules = None
    if truth_path is not None and truth_path.exists():
        truth = _read_json(truth_path)
        schedules = {series_key(s.feature_id, s.receptacle_id): s
                     for s in (WeeklySchedule.from_dict(d) for d in truth.get("features", []))}
    sched_priors = _schedule_priors(args.schedule_prior) if args.schedule_prior else None
    noise = None
    if args.p_miss is not None or args.p_false is not None:
        noise = NoiseModel(args.p_miss if args.p_miss is not None else 0.1,
                           args.p_false if args.p_false is not None else 0.1)
    bundle = train_bundle(train, val, replace(_train_config(args), seed=seed), schedules, sched_priors, noise)
    bundle.save(out)
    return bundle


def cmd_train(args) -> int:
    if args.runs:
        for d in _seed_dirs(Path(args.runs)):
            seed = int(d.name.split("_")[1])
            b = _train_one(args, d / DATASET, d / GROUND_TRUTH, d / MODELS, seed)
            print(f"{d.name}: {len(b.features)} models, noise p_miss={b.noise.p_miss:.3f} p_false={b.noise.p_false:.3f}")
        return EXIT_OK
    if not args.data or not args.out:
        raise CliError("train needs --data and --out, or --runs")
    truth = Path(args.schedule_config) if args.schedule_config else None
    if truth is not None and not truth.exists():
        raise CliError(f"file not found: {truth}")
    b = _train_one(args, Path(args.data), truth, Path(args.out), args.seed)
    print(f"{len(b.features)} models -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _write_traces(traces: dict, directory: Path, time_unit: float):
    directory.mkdir(parents=True, exist_ok=True)
    for method, per_feature in traces.items():
        for key, tr in per_feature.items():
            path = directory / f"{method}__{key.replace('|', '__')}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("t", "belief", "gt", "f_t", "log_odds"))
                prior = tr.prior if tr.prior is not None else [float("nan")] * len(tr.times)
                odds = tr.log_odds if tr.log_odds is not None else [float("nan")] * len(tr.times)
                for row in zip(tr.times, tr.belief, tr.gt, prior, odds):
                    w.writerow((repr(float(row[0])), repr(float(row[1])), int(row[2]), repr(float(row[3])),
                                repr(float(row[4]))))


def _evaluate_one(args, data_path: Path, model_path: Path, plots: Path | None):
    if not model_path.exists():
        raise CliError(f"file not found: {model_path}")
    try:
        bundle = ModelBundle.load(model_path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"{model_path}: malformed model file ({exc})") from None
    feats = _load_features(data_path)
    train, val, test = split_features(feats, args.split, args.start)
    test = {k: v for k, v in test.items() if len(v.times)}
    if not test:
        raise CliError(f"{data_path}: no rows inside the test weeks")
    missing = sorted(set(test) - set(bundle.features))
    if missing:
        raise CliError(f"models do not cover features {missing}")
    warmup = {k: _concat(train[k], val[k]) for k in test}
    methods = args.methods or available_methods(bundle)
    unknown = [m for m in methods if m not in available_methods(bundle)]
    if unknown:
        raise CliError(f"methods {unknown} not available with these models")
    reports, traces = evaluate_bundle(bundle, warmup, test, methods, adapt=not args.no_adapt,
                                      threshold=args.threshold)
    if plots is not None:
        _write_traces(traces, plots, bundle.config.time_unit)
    return reports


def cmd_evaluate(args) -> int:
    if args.runs:
        dirs = _seed_dirs(Path(args.runs))
        per_seed = []
        for d in dirs:
            plots = Path(args.emit_plots) / d.name if args.emit_plots else None
            per_seed.append(_evaluate_one(args, d / DATASET, d / MODELS, plots))
    else:
        if not args.data or not args.models:
            raise CliError("evaluate needs --data and --models, or --runs")
        plots = Path(args.emit_plots) if args.emit_plots else None
        per_seed = [_evaluate_one(args, Path(args.data), Path(args.models), plots)]
    methods = list(per_seed[0])
    rows = [summarize(METHOD_LABELS.get(m, m), [r[m] for r in per_seed]) for m in methods]
    print(format_table(rows))
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(table_json(rows))
    if args.per_seed_json:
        with open(args.per_seed_json, "w") as fh:
            json.dump([{m: r.to_dict() for m, r in rep.items()} for rep in per_seed], fh, indent=1)
    return EXIT_OK


# ---------------------------------------------------------------------------
# graph: ingest and query


def _graph_from_models(bundle: ModelBundle, prior_name: str, nodes: list[Node], delta: float) -> PredictiveGraph:
    models = sorted(bundle.features.values(), key=lambda m: m.key)
    if not models:
        raise CliError("model file has no features")

    def prior_of(m):
        if prior_name == "constant":
            return ConstantPrior(0.5)
        if prior_name not in m.priors:
            raise CliError(f"model {m.key!r} has no {prior_name!r} prior")
        return m.priors[prior_name]

    # unseen pairs get the first model's survival curves with an uninformative prior
    default = models[0].template(bundle.noise, ConstantPrior(0.5), bundle.config)
    g = PredictiveGraph(default, absence_threshold=delta, time_unit=bundle.config.time_unit)
    for node in nodes:
        g.add_node(node)
    for m in models:
        if m.receptacle_id:
            g.edge_templates[f"{m.feature_id}|{m.receptacle_id}"] = m.template(bundle.noise, prior_of(m), bundle.config)
    return g


def _snapshot(graph: PredictiveGraph, data: dict, index: int, max_dist: float) -> Snapshot:
    if "time" not in data:
        raise CliError(f"snapshot {index} has no time")
    t = float(data["time"]) / graph.time_unit
    recs = [n for n in graph.nodes.values() if n.kind is NodeKind.RECEPTACLE]
    visible = frozenset(data.get("visible_receptacles", [n.id for n in recs]))
    session = int(data.get("session_id", index))
    if "objects" in data:
        # detections with centroids: associate to the nearest visible receptacle
        objs = []
        for d in data["objects"]:
            node = graph.nodes.get(d["id"])
            if node is None:
                raise CliError(f"unknown object {d['id']!r}", EXIT_NOT_FOUND)
            size = tuple(h - l for l, h in zip(node.bbox.lo, node.bbox.hi))
            objs.append(Node.box(node.id, node.kind, tuple(float(x) for x in d["centroid"]), size, node.label))
        assoc = associate_session(objs, [r for r in recs if r.id in visible], max_dist, session)
    else:
        pairs = [(p["object_id"], p["receptacle_id"]) for p in data.get("placements", [])]
        assoc = SessionAssociation.from_pairs(session, pairs)
    for o, r in assoc.pairs:
        if o not in graph.nodes:
            raise CliError(f"unknown object {o!r}", EXIT_NOT_FOUND)
        if r not in graph.nodes:
            raise CliError(f"unknown receptacle {r!r}", EXIT_NOT_FOUND)
    return Snapshot(t, visible, assoc)


def cmd_ingest(args) -> int:
    path = Path(args.graph)
    if path.exists():
        graph = PredictiveGraph.from_dict(_read_json(path))
    else:
        if not args.models or not args.nodes:
            raise CliError(f"{path} does not exist; pass --models and --nodes to create it")
        if not Path(args.models).exists():
            raise CliError(f"file not found: {args.models}")
        nodes = [Node.from_dict(d) for d in _read_json(args.nodes)]
        graph = _graph_from_models(ModelBundle.load(args.models), args.prior, nodes, args.delta)
    data = _read_json(args.snapshots)
    items = data if isinstance(data, list) else [data]
    for i, item in enumerate(sorted(items, key=lambda d: float(d.get("time", 0.0)))):
        graph.ingest_observation(_snapshot(graph, item, i, args.max_dist))
    graph.save(path)
    print(f"ingested {len(items)} snapshots; {len(graph.edges)} edges; last map time "
          f"{graph.last_map_time * graph.time_unit:g} s")
    return EXIT_OK


def cmd_query(args) -> int:
    if not Path(args.graph).exists():
        raise CliError(f"file not found: {args.graph}")
    graph = PredictiveGraph.from_dict(_read_json(args.graph))
    t = args.time / graph.time_unit
    if t < graph.last_map_time:
        raise CliError(f"query time {args.time:g} s precedes the last map update "
                       f"{graph.last_map_time * graph.time_unit:g} s")
    objects = [args.object] if args.object else graph.semi_static_ids()
    out = {}
    for oid in objects:
        node = graph.nodes.get(oid)
        if node is None or node.kind is not NodeKind.SEMI_STATIC:
            raise CliError(f"unknown object {oid!r}", EXIT_NOT_FOUND)
        if not any(o == oid for o, _ in graph.edges):
            raise CliError(f"object {oid!r} has no receptacle edges yet", EXIT_NOT_FOUND)
        verdict, top = graph.query_object(oid, t, args.top_k)
        out[oid] = {**verdict.to_dict(), "time_s": args.time, "top_k": [[r, b] for r, b in top]}
    text = json.dumps(out[args.object] if args.object else out, indent=1, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.save:
        graph.save(args.graph)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    report, summary = bench_mod.run_bench(quick=args.quick)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(report.to_csv())
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_split(p):
    p.add_argument("--split", type=_weeks, default=(3, 1, 1), help="train,val,test weeks (default 3,1,1)")
    p.add_argument("--start", type=float, default=0.0, help="dataset origin in seconds (Monday 00:00)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semistatic", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="weekly schedules JSON, or {'hierarchical': [...]}; default: the 8-feature protocol")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_seeds, help="e.g. 0-4; writes one seed_<n> directory each")
    p.add_argument("--weeks", type=_weeks, default=(3, 1, 1), help="train,val,test weeks")
    p.add_argument("--tick-hours", type=_positive, default=1.0)
    p.add_argument("--p-miss", type=_rate, default=0.1)
    p.add_argument("--p-false", type=_rate, default=0.1)
    p.add_argument("--long-weekend", type=_days, default=(0, 4), help="test-week days given the weekend pattern")
    p.add_argument("--test-hours", type=_hours, default=(8.0, 20.0), help="observed hours of test weekdays")
    p.add_argument("--weekend-jitter", type=int, default=1, help="max ticks of weekend jitter in training weeks")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit survival mixtures, priors and noise")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--runs", help="directory of seed_<n> runs from simulate --seeds")
    p.add_argument("--schedule-config", help="ground-truth JSON with weekly schedules (enables the oracle prior)")
    p.add_argument("--schedule-prior", help="JSON of weekly slot lists per series (enables the schedule prior)")
    _add_split(p)
    p.add_argument("--gamma", type=_rate, default=0.99, help="forgetting factor in [0, 1]")
    p.add_argument("--alpha0", type=_positive, default=0.01, help="annealing rate per time unit")
    p.add_argument("--time-unit", type=_positive, default=60.0, help="seconds per estimator time unit")
    p.add_argument("--max-components", type=int, default=5)
    p.add_argument("--candidates", type=int, default=1000, help="Fourier candidate frequencies")
    p.add_argument("--restart-below", type=_optional_rate, default=0.5, help="regime restart threshold or 'none'")
    p.add_argument("--refresh-after", type=_optional_int, default=250, help="off-phase refresh count or 'none'")
    p.add_argument("--p-miss", type=_rate, help="override the estimated miss rate")
    p.add_argument("--p-false", type=_rate, help="override the estimated false-positive rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score methods on the test weeks")
    p.add_argument("--data")
    p.add_argument("--models")
    p.add_argument("--runs", help="directory of trained seed_<n> runs")
    _add_split(p)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--threshold", type=_rate, default=0.5)
    p.add_argument("--no-adapt", action="store_true", help="do not feed test observations to adaptive methods")
    p.add_argument("--emit-plots", help="directory for per-tick CSV traces")
    p.add_argument("--json", help="write the summary table as JSON")
    p.add_argument("--per-seed-json", help="write per-seed metrics as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ingest", help="update a predictive graph with snapshots")
    p.add_argument("--graph", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--models", help="models JSON (needed when creating the graph)")
    p.add_argument("--nodes", help="node JSON list (needed when creating the graph)")
    p.add_argument("--prior", default="fremen", help="model prior for edges: fremen, oracle, schedule or constant")
    p.add_argument("--delta", type=_rate, default=0.2, help="absence threshold")
    p.add_argument("--max-dist", type=_positive, default=1.5, help="association distance for centroid detections")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="predict object locations at a future time")
    p.add_argument("--graph", required=True)
    p.add_argument("--time", type=float, required=True, help="query time in seconds")
    p.add_argument("--object", help="object id; all semi-static objects when omitted")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", help="also write the verdict JSON here")
    p.add_argument("--save", action="store_true", help="store refreshed edge weights back into the graph")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="memory and timing scaling measurements")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"error: not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
