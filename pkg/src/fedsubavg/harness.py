"""Experiment configuration, the round loop, metrics and persistence."""

from __future__ import annotations

import copy
import functools
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .algorithms import LocalTrainConfig, StrategyState, canonical_strategy, run_central_sgd, run_round
from .core import FeatureHeatTable, build_heat_table, build_preconditioner
from .data import PartitionSpec, generate_synthetic, import_partition, ingest_movielens
from .errors import ConfigError, DivergenceError, StructuralError, UnsupportedOperation
from .models import QuadraticTask, SparseLRTask, Task
from .privacy import RRConfig, indicator_vector, rr_heat_table, secure_count
from .rng import child_rng

__all__ = [
    "TaskConfig",
    "StrategyConfig",
    "PrivacyConfig",
    "ExperimentConfig",
    "MetricSeries",
    "NotReached",
    "build_task",
    "build_counts",
    "run_experiment",
    "rounds_to_target",
    "compute_auc",
    "sweep",
    "CSV_HEADER",
]

log = logging.getLogger(__name__)

CSV_HEADER = "round,train_loss,test_metric,pgn"
TASK_KINDS = ("synthetic_lr", "example1", "quadratic_random", "movielens", "partition_file")
WORKERS_ENV = "FEDSUB_WORKERS"


@dataclass
class TaskConfig:
    kind: str = "synthetic_lr"
    N: int = 100
    V: int = 200
    target_dispersion: float = 10.0
    samples_per_client: int = 20
    features_per_sample: int = 2
    powerlaw_exponent: float = 1.0
    layout: str = "powerlaw"
    include_bias: bool = True
    test_samples_per_client: int = 5
    weight_scale: float = 1.0
    true_bias: float = 0.0
    data_seed: int = 0
    eval_size: int = 10_000
    # quadratic tasks
    M: int = 8
    noise: float = 0.0
    init: list | None = None
    rho1: float = 1.0
    rho2: float = 4.0
    alpha: float = 0.0
    # file-backed tasks
    path: str | None = None
    test_fraction: float = 0.2


@dataclass
class StrategyConfig:
    name: str = "fedsubavg"
    lr: float = 0.1
    iterations: int = 1
    batch_size: int = 1
    prox_mu: float = 0.0
    server_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weighted: bool = False


@dataclass
class PrivacyConfig:
    mechanism: str = "exact"  # exact | secure | rr
    p: float = 0.9


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    K: int = 10
    rounds: int = 100
    seed: int = 0
    cadence: int | None = None
    out: str | None = None

    def __post_init__(self):
        for name, cls in (("task", TaskConfig), ("strategy", StrategyConfig), ("privacy", PrivacyConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, _from_dict(cls, getattr(self, name), name))
        self.validate()

    @property
    def N(self) -> int:
        return self.task.N

    @property
    def eval_every(self) -> int:
        if self.cadence is not None:
            return self.cadence
        return 1 if self.rounds <= 500 else 5

    def validate(self) -> None:
        if self.task.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task.kind!r}; choose from {TASK_KINDS}")
        self.strategy.name = canonical_strategy(self.strategy.name)
        if self.task.kind in ("synthetic_lr", "example1", "quadratic_random") and not 1 <= self.K <= self.N:
            raise ConfigError(f"need 1 <= K <= N, got K={self.K}, N={self.N}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.cadence is not None and self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        s = self.strategy
        if not (s.lr > 0 and s.server_lr > 0 and s.eps > 0):
            raise ConfigError("all rates must be positive")
        if s.iterations < 1 or s.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.privacy.mechanism not in ("exact", "secure", "rr"):
            raise ConfigError(f"unknown count mechanism {self.privacy.mechanism!r}")
        if self.privacy.mechanism == "rr":
            RRConfig(self.privacy.p)
            if s.weighted:
                raise ConfigError("the weighted correction needs exact index sets, not rr counts")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, key: str, value) -> "ExperimentConfig":
        """Copy with one dotted key changed, e.g. ``"strategy.lr"`` or ``"K"``."""
        d = copy.deepcopy(self.to_dict())
        node = d
        *head, last = key.split(".")
        for h in head:
            if h not in node or not isinstance(node[h], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[h]
        if last not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[last] = value
        return ExperimentConfig.from_dict(d)


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --------------------------------------------------------------------------- metrics

@dataclass
class MetricSeries:
    rounds: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_metric: list[float | None] = field(default_factory=list)
    pgn: list[float | None] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    final_model: np.ndarray | None = field(default=None, repr=False)

    def append(self, r: int, loss: float, metric: float | None, pgn: float | None, iterations: int) -> str:
        if self.rounds and r <= self.rounds[-1]:
            raise StructuralError("round indices must increase")
        self.rounds.append(r)
        self.train_loss.append(loss)
        self.test_metric.append(metric)
        self.pgn.append(pgn)
        self.iterations.append(iterations)
        return _csv_row(r, loss, metric, pgn)

    def __len__(self) -> int:
        return len(self.rounds)

    def values(self, metric: str) -> list:
        if metric not in ("train_loss", "test_metric", "pgn"):
            raise ConfigError(f"unknown metric {metric!r}")
        return getattr(self, metric)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        lines += [_csv_row(*row) for row in zip(self.rounds, self.train_loss, self.test_metric, self.pgn)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path) -> "MetricSeries":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise StructuralError(f"{path}: missing metric header")
        s = cls()
        opt = lambda t: float(t) if t else None  # noqa: E731
        for ln in lines[1:]:
            r, loss, metric, pgn = ln.split(",")
            s.append(int(r), float(loss), opt(metric), opt(pgn), 0)
        return s


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _csv_row(r, loss, metric, pgn) -> str:
    return f"{r},{_fmt(loss)},{_fmt(metric)},{_fmt(pgn)}"


@functools.total_ordering
@dataclass(frozen=True)
class NotReached:
    """Target missed within ``rounds`` rounds; orders after every round up to ``rounds``."""

    rounds: int

    def _key(self) -> float:
        return self.rounds + 0.5

    def __lt__(self, other):
        o = other._key() if isinstance(other, NotReached) else other
        return self._key() < o

    def __eq__(self, other):
        if isinstance(other, NotReached):
            return self.rounds == other.rounds
        return False

    def __hash__(self):
        return hash(("NotReached", self.rounds))

    def __str__(self) -> str:
        return f"{self.rounds}+"


def rounds_to_target(series: MetricSeries, target: float, direction: str = "min-loss",
                     metric: str | None = None):
    """First recorded round whose metric reaches ``target``.

    ``min-loss`` reads ``train_loss`` and needs ``value <= target``;
    ``max-metric`` reads ``test_metric`` and needs ``value >= target``.
    """
    if len(series) == 0:
        raise StructuralError("empty metric series")
    if direction not in ("min-loss", "max-metric"):
        raise ConfigError("direction must be 'min-loss' or 'max-metric'")
    metric = metric or ("train_loss" if direction == "min-loss" else "test_metric")
    for r, v in zip(series.rounds, series.values(metric)):
        if v is None:
            continue
        if (v <= target) if direction == "min-loss" else (v >= target):
            return r
    return NotReached(series.rounds[-1])


def compute_auc(scores, labels=None) -> float:
    """Rank-based AUC: P(score of a positive > score of a negative), ties half.

    Accepts ``(score, label)`` pairs or two parallel arrays.
    """
    if labels is None:
        pairs = list(scores)
        s = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([p[1] for p in pairs], dtype=np.float64)
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise StructuralError("scores and labels differ in length")
    pos = y > 0.5
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --------------------------------------------------------------------------- task construction

def build_task(cfg: ExperimentConfig) -> Task:
    t = cfg.task
    if t.kind == "example1":
        init = (1.0, 1.0) if t.init is None else tuple(t.init)
        return QuadraticTask.example1(t.N, noise=t.noise, init=init)
    if t.kind == "quadratic_random":
        from .analysis import random_certified_instance

        task = random_certified_instance(child_rng(t.data_seed, "instance"), t.N, t.M, t.rho1, t.rho2, t.alpha)
        task.noise = t.noise
        if t.init is not None:
            task._init = np.asarray(t.init, dtype=np.float64)
        return task
    if t.kind == "synthetic_lr":
        spec = PartitionSpec(
            N=t.N, V=t.V, target_dispersion=t.target_dispersion, samples_per_client=t.samples_per_client,
            features_per_sample=t.features_per_sample, powerlaw_exponent=t.powerlaw_exponent,
            layout=t.layout, include_bias=t.include_bias, test_samples_per_client=t.test_samples_per_client,
            weight_scale=t.weight_scale, true_bias=t.true_bias, seed=t.data_seed)
        clients, _ = generate_synthetic(spec)
        return SparseLRTask(clients, spec.V, include_bias=spec.has_bias, eval_size=t.eval_size)
    if t.kind == "movielens":
        if t.path is None:
            raise ConfigError("movielens task needs task.path pointing at the ml-1m directory")
        root = Path(t.path)
        clients, _, layout = ingest_movielens(root / "ratings.dat", root / "users.dat", root / "movies.dat",
                                              seed=t.data_seed, test_fraction=t.test_fraction,
                                              return_layout=True)
        return SparseLRTask(clients, layout.V, include_bias=True, eval_size=t.eval_size)
    if t.kind == "partition_file":
        if t.path is None:
            raise ConfigError("partition_file task needs task.path")
        clients = import_partition(t.path)
        M = clients[0].index_set.M
        V = M - 1 if t.include_bias else M
        return SparseLRTask(clients, V, include_bias=t.include_bias, eval_size=t.eval_size)
    raise ConfigError(t.kind)


def build_counts(task: Task, cfg: ExperimentConfig) -> FeatureHeatTable:
    """Client counts for the correction, through the configured mechanism."""
    sets = [c.index_set for c in task.clients]
    mech = cfg.privacy.mechanism
    if mech == "exact":
        return build_heat_table(sets, task.M)
    if mech == "secure":
        return secure_count([indicator_vector(s) for s in sets], seed=cfg.seed)
    est = rr_heat_table(sets, RRConfig(cfg.privacy.p), seed=cfg.seed)
    log.info("rr counts: %d of %d entries clamped", int(est.clamped.sum()), est.counts.size)
    return est.heat_table()


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(n, 1)


# --------------------------------------------------------------------------- the loop

def _evaluate(task: Task, model: np.ndarray, D) -> tuple[float, float | None, float | None]:
    loss = task.train_loss(model)
    metric = None
    ts = task.test_scores(model)
    if ts is not None:
        scores, labels = ts
        if 0 < labels.sum() < labels.size:
            metric = compute_auc(scores, labels)
    try:
        g = task.exact_gradient(model)
    except UnsupportedOperation:
        pgn = None
    else:
        pgn = float(np.sum(D.diag * g * g))
    return loss, metric, pgn


def run_experiment(cfg: ExperimentConfig, out_dir=None, task: Task | None = None) -> MetricSeries:
    """Run one configured experiment; optionally persist it under ``out_dir``.

    Files written: ``config.json`` (all defaults filled in), ``metrics.csv``
    (flushed per record), ``model.txt`` and, on divergence, ``error.json``.
    """
    out = out_dir if out_dir is not None else cfg.out
    out = Path(out) if out is not None else None
    task = build_task(cfg) if task is None else task
    if not 1 <= cfg.K <= task.N:
        raise ConfigError(f"need 1 <= K <= N, got K={cfg.K}, N={task.N}")
    sc = cfg.strategy
    exact_heat = build_heat_table([c.index_set for c in task.clients], task.M)
    D_metric = build_preconditioner(exact_heat)
    heat = build_counts(task, cfg) if sc.name == "fedsubavg" else exact_heat
    weights = [c.weight for c in task.clients] if sc.weighted else None
    D = build_preconditioner(heat, weights=weights,
                             index_sets=[c.index_set for c in task.clients] if sc.weighted else None)

    model = task.init_model()
    series = MetricSeries()
    csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        csv = (out / "metrics.csv").open("w")
        csv.write(CSV_HEADER + "\n")

    def record(r: int) -> None:
        row = series.append(r, *_evaluate(task, model, D_metric), r * sc.iterations)
        if csv is not None:
            csv.write(row + "\n")
            csv.flush()

    every, R = cfg.eval_every, cfg.rounds
    lcfg = LocalTrainConfig(sc.lr, sc.iterations, sc.batch_size, sc.prox_mu)
    state = None if sc.name == "central_sgd" else StrategyState(
        sc.name, task.M, beta1=sc.beta1, beta2=sc.beta2, server_lr=sc.server_lr, eps=sc.eps)
    n_workers = _workers()
    executor = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
    t0 = time.perf_counter()
    try:
        record(0)
        if sc.name == "central_sgd":
            def cb(r, x):
                if r % every == 0 or r == R:
                    record(r)
            run_central_sgd(task, R, sc.iterations, sc.batch_size * cfg.K, sc.lr, cfg.seed, model, cb)
        else:
            for r in range(1, R + 1):
                run_round(model, state, task, cfg.K, lcfg, r, cfg.seed, heat, D, sc.weighted, executor)
                if r % every == 0 or r == R:
                    record(r)
    except DivergenceError as exc:
        if out is not None:
            (out / "error.json").write_text(json.dumps(
                {"error": "divergence", "message": str(exc), "round": exc.round_index,
                 "iteration": exc.iteration}, indent=2) + "\n")
        raise
    finally:
        if csv is not None:
            csv.close()
        if executor is not None:
            executor.shutdown()
    log.info("run finished: %d rounds in %.2fs", R, time.perf_counter() - t0)
    series.final_model = model
    if out is not None:
        (out / "model.txt").write_text("".join(repr(float(v)) + "\n" for v in model))
    return series


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep(cfg: ExperimentConfig, key: str, values: Sequence, out_dir=None) -> dict:
    """Run ``cfg`` once per value of the dotted ``key``; returns value -> series."""
    results = {}
    for v in values:
        v = _parse_value(v) if isinstance(v, str) else v
        c = cfg.replace(key, v)
        sub = None if out_dir is None else Path(out_dir) / f"{key}={v}"
        results[v] = run_experiment(c, sub)
    return results
