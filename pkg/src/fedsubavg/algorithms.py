"""Client local training and the server aggregation strategies.

Supported strategies: ``fedavg``, ``fedsubavg``, ``fedprox``,
``scaffold_approx``, ``fedadam``. ``central_sgd`` runs plain SGD on pooled
data and is driven by :func:`run_central_sgd` instead of :func:`run_round`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import FeatureHeatTable, Preconditioner, SparseUpdate, align_sum, build_preconditioner
from .errors import ConfigError, DivergenceError, StructuralError
from .models import Task
from .rng import child_rng

__all__ = [
    "STRATEGIES",
    "DIVERGENCE_LIMIT",
    "LocalTrainConfig",
    "StrategyState",
    "RoundRecord",
    "local_train",
    "aggregate_fedavg",
    "aggregate_fedsubavg",
    "aggregate_scaffold_approx",
    "server_adam_step",
    "sample_cohort",
    "run_round",
    "run_central_sgd",
]

STRATEGIES = ("fedavg", "fedsubavg", "fedprox", "scaffold_approx", "fedadam", "central_sgd")
DIVERGENCE_LIMIT = 1e12

_ALIASES = {
    "fedavg": "fedavg", "fedsubavg": "fedsubavg", "fedprox": "fedprox",
    "scaffold": "scaffold_approx", "scaffoldapprox": "scaffold_approx", "scaffold_approx": "scaffold_approx",
    "fedadam": "fedadam", "centralsgd": "central_sgd", "central_sgd": "central_sgd",
}


def canonical_strategy(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key, _ALIASES.get(key.replace("_", ""), None))
    if key is None:
        raise ConfigError(f"unknown strategy {name!r}; choose from {STRATEGIES}")
    return key


@dataclass(frozen=True)
class LocalTrainConfig:
    """Local SGD settings. ``lr`` is eta for the FedAvg family, gamma for FedSubAvg."""

    lr: float
    iterations: int = 1
    batch_size: int = 1
    prox_mu: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")


@dataclass
class StrategyState:
    """Server-side state carried between rounds."""

    strategy: str
    M: int
    beta1: float = 0.9
    beta2: float = 0.99
    server_lr: float = 1.0
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    prev_update: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)
        if not self.eps > 0:
            raise ConfigError("adaptivity eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.strategy == "fedadam":
            self.m = np.zeros(self.M) if self.m is None else self.m
            self.v = np.zeros(self.M) if self.v is None else self.v
            if self.m.shape != (self.M,) or self.v.shape != (self.M,):
                raise StructuralError("moment vectors must have length M")
        if self.strategy == "scaffold_approx" and self.prev_update is None:
            self.prev_update = np.zeros(self.M)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    cohort: tuple[int, ...]
    delta: SparseUpdate
    iterations: int  # global iteration count t = r * I at the end of the round


def local_train(task: Task, client, submodel_init, cfg: LocalTrainConfig, rng,
                round_index: int | None = None) -> SparseUpdate:
    """Run ``cfg.iterations`` SGD steps on the client's submodel.

    Returns ``x^{I+1} - x^1`` over ``S(i)``. With ``prox_mu > 0`` each step
    adds ``prox_mu * (x - x^1)`` to the gradient.
    """
    S = client.index_set.indices
    x0 = submodel_init.values if isinstance(submodel_init, SparseUpdate) else np.asarray(submodel_init, float)
    if x0.shape != (S.size,):
        raise StructuralError("submodel_init must hold one value per index in S(i)")
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cid = client.client_id
    batches = task.sample_batches(cid, rng, cfg.iterations, cfg.batch_size)
    x = x0.copy()
    for j, batch in enumerate(batches, start=1):
        g = task.local_gradient(cid, x, batch)
        if cfg.prox_mu > 0:
            g = g + cfg.prox_mu * (x - x0)
        if not np.isfinite(g).all():
            raise DivergenceError(f"client {cid}: non-finite gradient at local iteration {j}",
                                  round_index, j)
        x = x - cfg.lr * g
    return SparseUpdate.trusted(S, x - x0, task.M)


def _weighted_sum(updates: Sequence[SparseUpdate], weights: Sequence[float]) -> SparseUpdate:
    scaled = [SparseUpdate.trusted(u.indices, w * u.values, u.M) for u, w in zip(updates, weights)]
    return align_sum(scaled)


def aggregate_fedavg(updates: Sequence[SparseUpdate], K: int, weights: Sequence[float] | None = None,
                     M: int | None = None) -> SparseUpdate:
    """Average of the cohort's updates; an absent entry counts as zero."""
    if K <= 0:
        raise ConfigError("K must be positive")
    if len(updates) != K:
        raise StructuralError(f"expected {K} updates, got {len(updates)}")
    if weights is None:
        total = align_sum(updates, M)
        return SparseUpdate.trusted(total.indices, total.values / K, total.M)
    if len(weights) != K or any(w <= 0 for w in weights):
        raise ConfigError("need one positive weight per update")
    total = _weighted_sum(updates, weights)
    return SparseUpdate.trusted(total.indices, total.values / float(sum(weights)), total.M)


def aggregate_fedsubavg(updates: Sequence[SparseUpdate], heat: FeatureHeatTable, N: int, K: int,
                        weights: Sequence[float] | None = None,
                        preconditioner: Preconditioner | None = None) -> SparseUpdate:
    """FedAvg aggregate rescaled per index by ``N / n_m``.

    Pass ``preconditioner`` for the weighted correction (or to avoid
    rebuilding ``D`` every round).
    """
    avg = aggregate_fedavg(updates, K, weights, M=heat.M)
    if avg.indices.size and np.any(heat.counts[avg.indices] <= 0):
        bad = avg.indices[heat.counts[avg.indices] <= 0]
        raise StructuralError(f"update touches parameters {bad.tolist()[:10]} with zero client count")
    D = build_preconditioner(heat, N) if preconditioner is None else preconditioner
    return SparseUpdate.trusted(avg.indices, D.diag[avg.indices] * avg.values, avg.M)


def aggregate_scaffold_approx(state: StrategyState, updates: Sequence[SparseUpdate], N: int, K: int,
                              weights: Sequence[float] | None = None) -> SparseUpdate:
    """Server-side Scaffold approximation: blend the previous global update
    with the cohort mean, ``((N-K)/N) old + (K/N) mean``, and remember it.
    """
    if K > N:
        raise ConfigError(f"K={K} exceeds N={N}")
    avg = aggregate_fedavg(updates, K, weights, M=state.M)
    old = state.prev_update
    mean = avg.to_dense()
    new = ((N - K) / N) * old + (K / N) * mean
    state.prev_update = new
    touched = np.zeros(state.M, dtype=bool)
    touched[avg.indices] = True
    touched |= new != 0.0
    support = np.flatnonzero(touched)
    return SparseUpdate(support, new[support], state.M)


def server_adam_step(state: StrategyState, agg: SparseUpdate) -> SparseUpdate:
    """Adaptive server step on the averaged update.

    Moments are dense; the returned delta covers only ``agg``'s indices.
    """
    if state.m is None or state.v is None:
        raise StructuralError("server_adam_step needs a fedadam state")
    g = agg.to_dense()
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    idx = agg.indices
    step = state.server_lr * state.m[idx] / (np.sqrt(state.v[idx]) + state.eps)
    return SparseUpdate(idx, step, state.M)


def sample_cohort(N: int, K: int, seed: int, round_index: int) -> tuple[int, ...]:
    """K distinct clients, uniform without replacement, sorted ascending."""
    if not 1 <= K <= N:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={N}")
    if K == N:
        return tuple(range(N))
    rng = child_rng(seed, "cohort", round_index)
    return tuple(int(c) for c in np.sort(rng.choice(N, size=K, replace=False)))


def run_round(model: np.ndarray, state: StrategyState, task: Task, K: int, cfg: LocalTrainConfig,
              round_index: int, seed: int, heat: FeatureHeatTable | None = None,
              preconditioner: Preconditioner | None = None, weighted: bool = False,
              executor=None) -> RoundRecord:
    """One communication round; updates ``model`` in place.

    Only indices in the union of the cohort's index sets change, except for
    ``scaffold_approx``, whose blended global update also carries history.
    """
    strategy = state.strategy
    if strategy == "central_sgd":
        raise ConfigError("central_sgd is driven by run_central_sgd")
    N = task.N
    cohort = sample_cohort(N, K, seed, round_index)

    def train(cid):
        client = task.clients[cid]
        x_local = model[client.index_set.indices]
        rng = child_rng(seed, "batch", round_index, cid) if task.stochastic else None
        return local_train(task, client, x_local, cfg, rng, round_index)

    try:
        if executor is None:
            updates = [train(cid) for cid in cohort]
        else:
            updates = list(executor.map(train, cohort))
    except DivergenceError as exc:
        raise exc.with_round(round_index) from exc

    weights = [task.clients[c].weight for c in cohort] if weighted else None
    if strategy in ("fedavg", "fedprox"):
        agg = aggregate_fedavg(updates, K, weights, M=task.M)
    elif strategy == "fedsubavg":
        if heat is None:
            raise ConfigError("fedsubavg needs the feature heat table")
        agg = aggregate_fedsubavg(updates, heat, N, K, weights, preconditioner)
    elif strategy == "scaffold_approx":
        agg = aggregate_scaffold_approx(state, updates, N, K, weights)
    elif strategy == "fedadam":
        agg = server_adam_step(state, aggregate_fedavg(updates, K, weights, M=task.M))
    else:  # pragma: no cover - canonical_strategy rejects everything else
        raise ConfigError(strategy)

    model[agg.indices] += agg.values
    touched = model[agg.indices]
    if not np.all(np.isfinite(touched)) or np.any(np.abs(touched) > DIVERGENCE_LIMIT):
        raise DivergenceError(f"round {round_index}: parameter magnitude exceeded {DIVERGENCE_LIMIT:g}",
                              round_index)
    return RoundRecord(round_index, cohort, agg, round_index * cfg.iterations)


def run_central_sgd(task: Task, rounds: int, iterations: int, batch_size: int, lr: float, seed: int,
                    model: np.ndarray | None = None, callback=None) -> list[float]:
    """Plain SGD on pooled data: ``rounds * iterations`` steps of ``batch_size``.

    Returns the train loss after each round. ``callback(round, model)`` runs
    after every round when given.
    """
    if rounds < 1 or iterations < 1 or batch_size < 1 or not lr > 0:
        raise ConfigError("rounds, iterations, batch_size and lr must be positive")
    x = task.init_model() if model is None else model
    losses = []
    for r in range(1, rounds + 1):
        rng = child_rng(seed, "central", r)
        for j in range(1, iterations + 1):
            g = task.pooled_gradient(x, task.pooled_batch(rng, batch_size))
            if not np.isfinite(g).all():
                raise DivergenceError(f"central SGD: non-finite gradient at step {j}", r, j)
            x -= lr * g
        if np.any(np.abs(x) > DIVERGENCE_LIMIT):
            raise DivergenceError(f"round {r}: parameter magnitude exceeded {DIVERGENCE_LIMIT:g}", r)
        losses.append(task.train_loss(x))
        if callback is not None:
            callback(r, x)
    return losses
