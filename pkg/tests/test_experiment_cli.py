import json

import numpy as np
import pytest

from semistatic.cli import EXIT_CONFIG, EXIT_NOT_FOUND, EXIT_OK, main
from semistatic.experiment import ModelBundle, TrainConfig, estimate_noise, train_feature
from semistatic.filter import NoiseModel
from semistatic.simulator import HOUR_S, WEEK_S, FeatureData, WeeklySchedule, add_noise, generate_weekly
from semistatic.switching import eval_prior


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["simulate", "--out", str(root / "sim"), "--seed", "3"]) == EXIT_OK
    assert main(["train", "--data", str(root / "sim" / "dataset.csv"), "--schedule-config",
                 str(root / "sim" / "ground_truth.json"), "--out", str(root / "models.json")]) == EXIT_OK
    return root


def test_simulate_writes_eight_series(run):
    files = sorted(p.name for p in (run / "sim" / "series").iterdir())
    assert len(files) == 8
    assert "laptop__office_desk.csv" in files


def test_simulate_same_seed_byte_identical(run, tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--seed", "3"]) == EXIT_OK
    for name in ("dataset.csv", "ground_truth.json"):
        assert (tmp_path / name).read_bytes() == (run / "sim" / name).read_bytes()


def test_simulate_errors(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--weeks", "0,0,0"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", "--out", str(tmp_path), "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_train_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.json")]) == EXIT_CONFIG
    assert main(["train", "--data", "x.csv", "--out", "m.json", "--gamma", "9.21"]) == EXIT_CONFIG
    (tmp_path / "empty.csv").write_text("time_s,feature_id,receptacle_id,gt,observed\n")
    assert main(["train", "--data", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "m.json")]) == EXIT_CONFIG


def test_models_have_all_priors(run):
    b = ModelBundle.load(run / "models.json")
    assert len(b.features) == 8
    assert all({"fremen", "oracle"} <= set(m.priors) for m in b.features.values())


def test_clean_periodic_persistence_median():
    # 10 h on, 14 h off, every day, sampled hourly and noise free
    s = WeeklySchedule.daily("lamp", [(8, 18)], [(8, 18)])
    gt = generate_weekly(s, 4)
    fd = FeatureData("lamp", "", gt.timestamps, gt.values, gt.values)
    cfg = TrainConfig(n_candidates=200)
    m = train_feature(fd.window(0, 3 * WEEK_S), fd.window(3 * WEEK_S, 4 * WEEK_S), cfg)
    k = int(np.argmax(m.persistence.weights))
    assert m.persistence.median(k) == pytest.approx(10 * HOUR_S / cfg.time_unit, rel=0.2)


def test_noise_estimate_close_to_truth():
    s = WeeklySchedule.daily("lamp", [(8, 18)], [(8, 18)])
    gt = generate_weekly(s, 8)
    obs = add_noise(gt, NoiseModel(0.1, 0.1), np.random.default_rng(0))
    est = estimate_noise([FeatureData("lamp", "", gt.timestamps, gt.values, obs.values)])
    assert abs(est.p_miss - 0.1) <= 0.02 and abs(est.p_false - 0.1) <= 0.02


def test_evaluate_round_trip_identical(run, tmp_path, capsys):
    args = ["evaluate", "--data", str(run / "sim" / "dataset.csv"), "--models", str(run / "models.json")]
    assert main(args + ["--per-seed-json", str(tmp_path / "a.json")]) == EXIT_OK
    assert main(args + ["--per-seed-json", str(tmp_path / "b.json"), "--emit-plots", str(tmp_path / "plots")]) == EXIT_OK
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    out = capsys.readouterr().out
    assert "Perpetua*" in out and "MAE" in out
    per_seed = json.loads((tmp_path / "a.json").read_text())[0]
    assert per_seed["perpetua_star_oracle"]["mae"] <= per_seed["perpetua_star_fremen"]["mae"]
    plot = tmp_path / "plots" / "perpetua_star_fremen__laptop__office_desk.csv"
    header, first = plot.read_text().splitlines()[:2]
    assert header == "t,belief,gt,f_t,log_odds"
    assert 0.0 <= float(first.split(",")[1]) <= 1.0


def test_evaluate_errors(run, tmp_path):
    data = str(run / "sim" / "dataset.csv")
    assert main(["evaluate", "--data", data, "--models", str(tmp_path / "none.json")]) == EXIT_CONFIG
    one = json.loads((run / "models.json").read_text())
    one["features"] = one["features"][:1]
    (tmp_path / "one.json").write_text(json.dumps(one))
    assert main(["evaluate", "--data", data, "--models", str(tmp_path / "one.json")]) == EXIT_CONFIG


def _nodes(tmp_path):
    nodes = [{"id": "office_desk", "kind": "receptacle", "bbox": {"min": [0, 0, 0], "max": [1, 1, 1]}},
             {"id": "shelf", "kind": "receptacle", "bbox": {"min": [3, 0, 0], "max": [4, 1, 1]}},
             {"id": "laptop", "kind": "semi_static", "bbox": {"min": [0.4, 0.4, 0.4], "max": [0.6, 0.6, 0.6]}}]
    (tmp_path / "nodes.json").write_text(json.dumps(nodes))
    return tmp_path / "nodes.json"


def _ingest(run, tmp_path, snaps):
    (tmp_path / "snaps.json").write_text(json.dumps(snaps))
    return main(["ingest", "--graph", str(tmp_path / "g.json"), "--snapshots", str(tmp_path / "snaps.json"),
                 "--models", str(run / "models.json"), "--nodes", str(_nodes(tmp_path))])


def test_ingest_and_query_codes(run, tmp_path, capsys):
    t0 = 4 * WEEK_S + 9 * HOUR_S
    snaps = [{"time": t0 + k * HOUR_S, "placements": [{"object_id": "laptop", "receptacle_id": "office_desk"}]}
             for k in range(3)]
    assert _ingest(run, tmp_path, snaps) == EXIT_OK
    g = str(tmp_path / "g.json")
    capsys.readouterr()
    assert main(["query", "--graph", g, "--time", str(t0 + 2 * HOUR_S), "--object", "laptop"]) == EXIT_OK
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["best_receptacle"] == "office_desk" == verdict["top_k"][0][0]
    assert main(["query", "--graph", g, "--time", str(t0), "--object", "laptop"]) == EXIT_CONFIG
    assert main(["query", "--graph", g, "--time", str(t0 + 3 * HOUR_S), "--object", "ghost"]) == EXIT_NOT_FOUND
    assert main(["query", "--graph", str(tmp_path / "none.json"), "--time", "0"]) == EXIT_CONFIG
    ghost = [{"time": t0 + 5 * HOUR_S, "placements": [{"object_id": "ghost", "receptacle_id": "office_desk"}]}]
    (tmp_path / "ghost.json").write_text(json.dumps(ghost))
    assert main(["ingest", "--graph", g, "--snapshots", str(tmp_path / "ghost.json")]) == EXIT_NOT_FOUND


def test_query_far_future_follows_prior(run, tmp_path, capsys):
    t0 = 4 * WEEK_S + 9 * HOUR_S
    snaps = [{"time": t0 + k * HOUR_S, "placements": [{"object_id": "laptop", "receptacle_id": "office_desk"}]}
             for k in range(3)]
    assert _ingest(run, tmp_path, snaps) == EXIT_OK
    prior = ModelBundle.load(run / "models.json").features["laptop|office_desk"].priors["fremen"]
    g = str(tmp_path / "g.json")
    for hours in (24 * 10 + 3, 24 * 10 + 15):
        t = t0 + 2 * HOUR_S + hours * HOUR_S
        capsys.readouterr()
        assert main(["query", "--graph", g, "--time", str(t), "--object", "laptop"]) == EXIT_OK
        belief = json.loads(capsys.readouterr().out)["per_receptacle"]["office_desk"]
        f = float(eval_prior(prior, t / 60.0))
        assert belief == pytest.approx(f, abs=1e-3)
        assert (belief >= 0.5) == (f >= 0.5)


def test_runs_workflow(tmp_path, capsys):
    runs = str(tmp_path / "runs")
    assert main(["simulate", "--out", runs, "--seeds", "0-1"]) == EXIT_OK
    assert main(["train", "--runs", runs]) == EXIT_OK
    assert main(["evaluate", "--runs", runs, "--json", str(tmp_path / "t.json")]) == EXIT_OK
    table = json.loads((tmp_path / "t.json").read_text())
    assert all(row["seeds"] == 2 for row in table)


def test_bad_arguments_exit_two():
    assert main(["bogus"]) == EXIT_CONFIG
    assert main(["query", "--graph", "g.json"]) == EXIT_CONFIG
