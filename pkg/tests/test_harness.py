import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedsubavg import cli
from fedsubavg.errors import ConfigError, DivergenceError, StructuralError
from fedsubavg.harness import (
    CSV_HEADER,
    ExperimentConfig,
    MetricSeries,
    NotReached,
    StrategyConfig,
    TaskConfig,
    compute_auc,
    rounds_to_target,
    run_experiment,
    sweep,
)


def _ex1(strategy, lr, rounds, N=100):
    return ExperimentConfig(task=TaskConfig(kind="example1", N=N), strategy=StrategyConfig(strategy, lr=lr),
                            K=N, rounds=rounds)


def _small_lr(**kw):
    base = dict(task=TaskConfig(N=20, V=40, target_dispersion=4.0), K=5, rounds=6,
                strategy=StrategyConfig("fedsubavg", lr=0.1, iterations=2, batch_size=2))
    base.update(kw)
    return ExperimentConfig(**base)


def test_example1_fedsubavg_one_round():
    s = run_experiment(_ex1("fedsubavg", 0.5, 1))
    assert np.all(np.abs(s.final_model) <= 1e-12)
    assert s.rounds == [0, 1]


def test_example1_fedavg_200_rounds():
    s = run_experiment(_ex1("fedavg", 0.5, 200))
    assert s.final_model[0] == pytest.approx(0.99 ** 200, rel=1e-12)
    assert len(s) == 201 and s.pgn[0] == pytest.approx(100 * (2 / 100) ** 2 + 4.0, rel=1e-12)


def test_replay_byte_identical(tmp_path):
    cfg = _small_lr()
    run_experiment(cfg, tmp_path / "a")
    replay = ExperimentConfig.load(tmp_path / "a" / "config.json")
    run_experiment(replay, tmp_path / "b")
    for name in ("metrics.csv", "model.txt", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_do_not_change_results(tmp_path, monkeypatch):
    cfg = _small_lr()
    run_experiment(cfg, tmp_path / "a")
    monkeypatch.setenv("FEDSUB_WORKERS", "3")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_csv_layout_and_roundtrip(tmp_path):
    s = run_experiment(_small_lr(), tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == CSV_HEADER == "round,train_loss,test_metric,pgn"
    assert text == s.to_csv()
    back = MetricSeries.from_csv(tmp_path / "metrics.csv")
    assert back.rounds == s.rounds and back.train_loss == s.train_loss
    assert all(0.0 <= m <= 1.0 for m in s.test_metric)


def test_config_defaults_written_back(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"task": {"kind": "example1", "N": 4}, "K": 4, "rounds": 2}))
    cfg = ExperimentConfig.load(path)
    run_experiment(cfg, tmp_path / "out")
    stored = json.loads((tmp_path / "out" / "config.json").read_text())
    assert stored["strategy"]["eps"] == 1e-8 and stored["strategy"]["beta2"] == 0.99
    assert stored["privacy"] == {"mechanism": "exact", "p": 0.9}


def test_cadence_default_and_long_runs():
    assert _small_lr(rounds=500).eval_every == 1
    assert _small_lr(rounds=501).eval_every == 5
    s = run_experiment(_ex1("fedavg", 0.5, 12, N=4).replace("cadence", 5))
    assert s.rounds == [0, 5, 10, 12]


@pytest.mark.parametrize("bad", [dict(K=0), dict(K=21), dict(rounds=0), dict(cadence=0)])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        _small_lr(**bad)


def test_config_rejects_unknown_keys_and_rates():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"task": {"kind": "example1", "bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"strategy": {"lr": -1.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"privacy": {"mechanism": "rr", "p": 0.5}})
    with pytest.raises(ConfigError):
        _small_lr().replace("strategy.nope", 1)


def test_divergence_flushes_partial(tmp_path):
    cfg = _ex1("fedavg", 5.0, 100, N=10)
    with pytest.raises(DivergenceError):
        run_experiment(cfg, tmp_path)
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "divergence" and err["round"] >= 1
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == CSV_HEADER and len(rows) == err["round"] + 1


@pytest.mark.parametrize("mech", ["secure", "rr"])
def test_count_mechanisms_run(mech):
    cfg = _small_lr(privacy={"mechanism": mech, "p": 0.95})
    s = run_experiment(cfg)
    assert np.isfinite(s.train_loss[-1])


def test_secure_counts_match_exact():
    a = run_experiment(_small_lr())
    b = run_experiment(_small_lr(privacy={"mechanism": "secure"}))
    assert a.train_loss == b.train_loss


@pytest.mark.parametrize("name", ["fedavg", "fedprox", "scaffold_approx", "fedadam", "central_sgd"])
def test_all_strategies_run(name):
    s = run_experiment(_small_lr(strategy=StrategyConfig(name, lr=0.1, iterations=2, batch_size=2,
                                                         prox_mu=0.01, server_lr=0.01)))
    assert s.rounds[-1] == 6 and np.isfinite(s.train_loss[-1])


def test_weighted_fedsubavg_runs():
    s = run_experiment(_small_lr(strategy=StrategyConfig("fedsubavg", lr=0.1, weighted=True)))
    assert np.isfinite(s.train_loss[-1])


def test_partition_file_task(tmp_path):
    from fedsubavg.data import PartitionSpec, export_partition, generate_synthetic

    spec = PartitionSpec(N=10, V=20, target_dispersion=3.0)
    clients, _ = generate_synthetic(spec)
    export_partition(clients, tmp_path / "p.tsv", (spec.bias_index,))
    a = run_experiment(_small_lr(task=TaskConfig(N=10, V=20, target_dispersion=3.0), K=3))
    b = run_experiment(_small_lr(task=TaskConfig(kind="partition_file", path=str(tmp_path / "p.tsv"), N=10),
                                 K=3))
    assert a.train_loss == b.train_loss


def _series(values):
    s = MetricSeries()
    for r, v in enumerate(values):
        s.append(r, v, None, None, r)
    return s


def test_rounds_to_target_examples():
    vals = np.linspace(1.0, 0.2, 201)
    s = _series(vals)
    crossing = int(np.argmax(vals <= 0.325))
    assert rounds_to_target(s, 0.325) == crossing
    assert rounds_to_target(s, 0.1) == NotReached(200)
    assert str(rounds_to_target(s, 0.1)) == "200+"
    assert rounds_to_target(_series([1.0, 0.5, 0.4]), 0.6) == 1


def test_rounds_to_target_max_metric():
    s = MetricSeries()
    for r, m in enumerate([0.5, 0.55, 0.62, 0.61]):
        s.append(r, 1.0, m, None, r)
    assert rounds_to_target(s, 0.6, "max-metric") == 2
    with pytest.raises(StructuralError):
        rounds_to_target(MetricSeries(), 0.1)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0, 10), st.floats(0, 5))
def test_rounds_to_target_monotone(values, target, loosen):
    s = _series(values)
    assert rounds_to_target(s, target + loosen) <= rounds_to_target(s, target)


def test_not_reached_ordering():
    assert NotReached(10) > 10 and NotReached(10) < 11 and 3 < NotReached(10)


def test_auc_examples():
    assert compute_auc([(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]) == 1.0
    assert compute_auc([(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 0)]) == 0.75
    assert compute_auc([(0.5, 1), (0.5, 0)]) == 0.5
    with pytest.raises(ConfigError):
        compute_auc([(0.1, 1), (0.2, 1)])


def test_auc_random_labels():
    rng = np.random.default_rng(0)
    assert abs(compute_auc(rng.random(200_000), rng.integers(0, 2, 200_000)) - 0.5) <= 0.01


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_matches_pair_count(pairs):
    pos = [s for s, y in pairs if y]
    neg = [s for s, y in pairs if not y]
    if not pos or not neg:
        return
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert compute_auc(pairs) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)


def test_sweep(tmp_path):
    res = sweep(_small_lr(), "K", ["2", "5"], tmp_path)
    assert set(res) == {2, 5}
    assert (tmp_path / "K=2" / "metrics.csv").is_file()


# ---------------------------------------------------------------- CLI

def _write(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    cfg.save(path)
    return str(path)


def test_cli_run_and_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, _ex1("fedsubavg", 0.5, 1, N=10))
    assert cli.main(["run", "--config", good, "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"K": 0}')
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    div = tmp_path / "div.json"
    _ex1("fedavg", 5.0, 100, N=10).save(div)
    assert cli.main(["run", "--config", str(div)]) == cli.EXIT_DIVERGED
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_cli_sweep(tmp_path, capsys):
    path = _write(tmp_path, _small_lr())
    assert cli.main(["sweep", "--config", path, "--vary", "K=2,5", "--target", "0.69"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "K,final_train_loss,rounds_to_target" and len(out) == 3
    assert cli.main(["sweep", "--config", path, "--vary", "K"]) == cli.EXIT_CONFIG


def test_cli_check_theorems(tmp_path, capsys):
    report = tmp_path / "t.jsonl"
    assert cli.main(["check-theorems", "--instances", "3", "--report", str(report)]) == 0
    assert "failed=0" in capsys.readouterr().out
    assert report.read_text().count("\n") > 0


@pytest.mark.parametrize("mech", ["rr", "exact"])
def test_cli_estimate_counts(tmp_path, capsys, mech):
    path = _write(tmp_path, _small_lr())
    assert cli.main(["estimate-counts", "--mechanism", mech, "--p", "0.9", "--config", path]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "index,true_count,estimate,clamped" and len(lines) == 42
    if mech == "exact":
        assert all(float(r.split(",")[1]) == float(r.split(",")[2]) for r in lines[1:])
