"""Differentiable federated tasks with hand-derived gradient and Hessian oracles.

The global objective is ``f(X) = (1/N) sum_i f_i(X_{S(i)})``. Every gradient
a client computes lives on its own index set ``S(i)``; the dense oracles
(``exact_gradient``, ``exact_hessian``) align the local pieces by index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import IndexSet, SparseUpdate
from .data import ClientDataset, Sample
from .errors import ConfigError, ResourceError, StructuralError, UnsupportedOperation

__all__ = [
    "HESSIAN_CAP",
    "Task",
    "QuadraticTask",
    "QuadraticCertificate",
    "SparseLRTask",
    "stochastic_gradient",
    "exact_gradient",
    "exact_hessian",
]

HESSIAN_CAP = 256


def _check_cap(M: int, cap: int) -> None:
    if M > cap:
        raise ResourceError(f"dense Hessian requested for M={M} above cap {cap}")


class Task:
    """Interface shared by all tasks; subclasses fill in the oracles."""

    M: int
    clients: list[ClientDataset]
    stochastic: bool = True  # False lets callers skip building batch rngs

    @property
    def N(self) -> int:
        return len(self.clients)

    def index_set(self, cid: int) -> IndexSet:
        return self.clients[cid].index_set

    def sample_batches(self, cid: int, rng: np.random.Generator, iterations: int, batch_size: int):
        """Draw ``iterations`` batches for one client, uniform with replacement."""
        raise UnsupportedOperation(type(self).__name__)

    def local_gradient(self, cid: int, x_local: np.ndarray, batch) -> np.ndarray:
        """Batch-mean gradient of F on ``S(cid)``, aligned with ``index_set(cid)``."""
        raise UnsupportedOperation(type(self).__name__)

    def objective(self, model: np.ndarray) -> float:
        raise UnsupportedOperation(f"{type(self).__name__} has no full-data objective")

    def exact_gradient(self, model: np.ndarray) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no exact gradient oracle")

    def exact_hessian(self, model: np.ndarray, cap: int = HESSIAN_CAP) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no exact Hessian oracle")

    def train_loss(self, model: np.ndarray) -> float:
        return self.objective(model)

    def test_scores(self, model: np.ndarray):
        """(scores, labels) on held-out data, or None when the task has none."""
        return None

    def pooled_batch(self, rng: np.random.Generator, size: int):
        raise UnsupportedOperation(f"{type(self).__name__} does not support pooled sampling")

    def pooled_gradient(self, model: np.ndarray, batch) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} does not support pooled sampling")

    def init_model(self) -> np.ndarray:
        return np.zeros(self.M)


# --------------------------------------------------------------------------- quadratics

@dataclass(frozen=True)
class QuadraticCertificate:
    """Constants that provably bound every local Hessian of a quadratic task.

    ``concave[i]`` marks clients whose Hessian lies in ``[-rho2, -rho1]``;
    ``alpha`` bounds the per-parameter fraction of such clients.
    """

    rho1: float
    rho2: float
    alpha: float
    concave: tuple[bool, ...]

    @property
    def mu0(self) -> float:
        return self.rho1 - self.alpha * (self.rho1 + self.rho2)

    @property
    def L(self) -> float:
        return self.rho2


class QuadraticTask(Task):
    """Clients with ``f_i(x) = E[(1/2)(x_S - xi)^T A_i (x_S - xi)]``, ``xi ~ c_i + s N(0, I)``.

    ``A_i = 2I`` with ``c_i = 0`` gives the mean-square error of the two
    parameter toy problem (see :meth:`example1`).
    """

    def __init__(
        self,
        M: int,
        index_sets: Sequence[Sequence[int]],
        hessians: Sequence[np.ndarray],
        centers: Sequence[np.ndarray] | None = None,
        noise: float = 0.0,
        certificate: QuadraticCertificate | None = None,
        init: Sequence[float] | None = None,
    ):
        if noise < 0:
            raise ConfigError("noise scale must be non-negative")
        self.M = int(M)
        self.noise = float(noise)
        self.certificate = certificate
        self._A = []
        self._c = []
        self.clients = []
        for cid, idx in enumerate(index_sets):
            s = IndexSet(idx, M)
            A = np.asarray(hessians[cid], dtype=np.float64)
            if A.shape != (len(s), len(s)) or not np.allclose(A, A.T, rtol=0, atol=0):
                raise StructuralError(f"client {cid}: Hessian must be symmetric {len(s)}x{len(s)}")
            c = np.zeros(len(s)) if centers is None else np.asarray(centers[cid], dtype=np.float64)
            self._A.append(A)
            self._c.append(c)
            self.clients.append(ClientDataset(cid, (), s, 1.0))
        self._init = None if init is None else np.asarray(init, dtype=np.float64)

    @classmethod
    def example1(cls, N: int, noise: float = 0.0, init: Sequence[float] = (1.0, 1.0)) -> "QuadraticTask":
        """Client 0 holds ``(w1, w2)``, clients 1..N-1 hold ``w2`` only."""
        if N < 1:
            raise ConfigError("need at least one client")
        sets = [[0, 1]] + [[1]] * (N - 1)
        hess = [2.0 * np.eye(2)] + [np.array([[2.0]])] * (N - 1)
        cert = QuadraticCertificate(2.0, 2.0, 0.0, (False,) * N)
        return cls(2, sets, hess, noise=noise, certificate=cert, init=init)

    @property
    def stochastic(self) -> bool:
        return self.noise > 0.0

    def init_model(self) -> np.ndarray:
        return np.zeros(self.M) if self._init is None else self._init.copy()

    def local_hessian(self, cid: int) -> np.ndarray:
        return self._A[cid]

    def local_objective(self, cid: int, x_local: np.ndarray) -> float:
        A, c = self._A[cid], self._c[cid]
        d = x_local - c
        return 0.5 * float(d @ A @ d) + 0.5 * self.noise ** 2 * float(np.trace(A))

    def sample_batches(self, cid, rng, iterations, batch_size):
        c = self._c[cid]
        if self.noise == 0.0:
            # every draw equals the center, so one row stands in for the batch
            return [c[None, :]] * iterations
        xi = c + self.noise * rng.standard_normal((iterations, batch_size, c.size))
        return list(xi)

    def local_gradient(self, cid, x_local, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[0] == 0:
            raise StructuralError("empty batch")
        xi = batch[0] if batch.shape[0] == 1 else batch.mean(axis=0)
        return self._A[cid] @ (x_local - xi)

    def objective(self, model):
        total = 0.0
        for cid, client in enumerate(self.clients):
            total += self.local_objective(cid, model[client.index_set.indices])
        return total / self.N

    def exact_gradient(self, model):
        g = np.zeros(self.M)
        for cid, client in enumerate(self.clients):
            idx = client.index_set.indices
            g[idx] += self._A[cid] @ (model[idx] - self._c[cid])
        return g / self.N

    def exact_hessian(self, model=None, cap=HESSIAN_CAP):
        _check_cap(self.M, cap)
        H = np.zeros((self.M, self.M))
        for cid, client in enumerate(self.clients):
            idx = client.index_set.indices
            H[np.ix_(idx, idx)] += self._A[cid]
        return H / self.N

    def minimizer(self) -> np.ndarray:
        """Stationary point of f (unique when the global Hessian is non-singular)."""
        H = self.exact_hessian()
        return np.linalg.solve(H, -self.exact_gradient(np.zeros(self.M)))

    def pooled_batch(self, rng, size):
        cids = rng.integers(0, self.N, size=size)
        return [(int(c), self.sample_batches(int(c), rng, 1, 1)[0][0]) for c in cids]

    def pooled_gradient(self, model, batch):
        if not batch:
            raise StructuralError("empty batch")
        g = np.zeros(self.M)
        for cid, xi in batch:
            idx = self.clients[cid].index_set.indices
            g[idx] += self._A[cid] @ (model[idx] - xi)
        return g / len(batch)


# --------------------------------------------------------------------------- sparse LR

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z) - y * z


def _pad_features(samples: Sequence[Sample], extra: Sequence[int], pad: int, remap=None) -> np.ndarray:
    width = max((len(f) for f, _ in samples), default=0) + len(extra)
    out = np.full((len(samples), max(width, 1)), pad, dtype=np.int64)
    for r, (feats, _) in enumerate(samples):
        row = list(feats) + list(extra)
        if remap is not None:
            row = remap(row)
        out[r, :len(row)] = row
    return out


class SparseLRTask(Task):
    """Logistic regression over one-hot features (embedding dimension 1).

    Parameter ``m < V`` is the weight of feature ``m``; when ``include_bias``
    the last parameter is a global bias that every client's submodel holds.
    ``f_i`` is the mean binary cross-entropy over client ``i``'s training
    samples.
    """

    def __init__(self, clients: Sequence[ClientDataset], V: int, include_bias: bool = True,
                 eval_size: int = 10_000, eval_seed: int = 0):
        self.V = int(V)
        self.include_bias = include_bias
        self.M = self.V + (1 if include_bias else 0)
        self.bias_index = self.V if include_bias else None
        self.clients = list(clients)
        extra = () if self.bias_index is None else (self.bias_index,)

        self._local = []
        for c in self.clients:
            if c.index_set.M != self.M:
                raise StructuralError(f"client {c.client_id} declared for M={c.index_set.M}, task M={self.M}")
            S = c.index_set.indices
            remap = lambda row, S=S: np.searchsorted(S, row)
            flat = np.fromiter((f for feats, _ in c.samples for f in feats), dtype=np.int64)
            if flat.size and not np.all(np.isin(flat, S)):
                raise StructuralError(f"client {c.client_id}: samples reference indices outside S(i)")
            if extra and extra[0] not in c.index_set:
                raise StructuralError(f"client {c.client_id}: bias index missing from S(i)")
            F = _pad_features(c.samples, extra, len(S), remap)
            y = np.array([lab for _, lab in c.samples], dtype=np.float64)
            self._local.append((F, y))

        all_train = [s for c in self.clients for s in c.samples]
        self._F = _pad_features(all_train, extra, self.M)
        self._y = np.array([lab for _, lab in all_train], dtype=np.float64)
        self._owner = np.concatenate([np.full(len(c.samples), i) for i, c in enumerate(self.clients)]
                                     ) if all_train else np.zeros(0, np.int64)
        sizes = np.array([max(len(c.samples), 1) for c in self.clients], dtype=np.float64)
        self._w = (1.0 / (self.N * sizes))[self._owner] if all_train else np.zeros(0)

        all_test = [s for c in self.clients for s in c.test_samples]
        self._F_test = _pad_features(all_test, extra, self.M) if all_test else None
        self._y_test = np.array([lab for _, lab in all_test], dtype=np.float64)

        n = self._y.size
        rng = np.random.default_rng(eval_seed)
        self._eval = np.sort(rng.choice(n, size=eval_size, replace=False)) if n > eval_size else np.arange(n)

    # logits with a padded zero slot at the end of the parameter vector
    @staticmethod
    def _logits(x_ext: np.ndarray, F: np.ndarray) -> np.ndarray:
        return x_ext[F].sum(axis=1)

    def _ext(self, model: np.ndarray) -> np.ndarray:
        return np.append(model, 0.0)

    def sample_batches(self, cid, rng, iterations, batch_size):
        n = len(self.clients[cid].samples)
        if n == 0 or batch_size < 1:
            raise StructuralError(f"client {cid} has no samples to draw a batch from")
        return list(rng.integers(0, n, size=(iterations, batch_size)))

    def local_gradient(self, cid, x_local, batch):
        batch = np.asarray(batch)
        if batch.size == 0:
            raise StructuralError("empty batch")
        F, y = self._local[cid]
        Fb = F[batch]
        x_ext = np.append(x_local, 0.0)
        r = _sigmoid(self._logits(x_ext, Fb)) - y[batch]
        g = np.bincount(Fb.ravel(), weights=np.repeat(r, Fb.shape[1]), minlength=x_ext.size)
        return g[:-1] / batch.size

    def gradient_for_samples(self, client: ClientDataset, x_local: np.ndarray,
                             samples: Sequence[Sample]) -> np.ndarray:
        if not samples:
            raise StructuralError("empty batch")
        S = client.index_set.indices
        extra = () if self.bias_index is None else (self.bias_index,)
        flat = [f for feats, _ in samples for f in list(feats) + list(extra)]
        if not np.all(np.isin(flat, S)):
            raise StructuralError("batch references indices outside the client's submodel")
        F = _pad_features(samples, extra, len(S), lambda row: np.searchsorted(S, row))
        y = np.array([lab for _, lab in samples], dtype=np.float64)
        x_ext = np.append(x_local, 0.0)
        r = _sigmoid(self._logits(x_ext, F)) - y
        g = np.bincount(F.ravel(), weights=np.repeat(r, F.shape[1]), minlength=x_ext.size)
        return g[:-1] / len(samples)

    def objective(self, model):
        z = self._logits(self._ext(model), self._F)
        return float(np.sum(self._w * _bce(z, self._y)))

    def exact_gradient(self, model):
        z = self._logits(self._ext(model), self._F)
        r = self._w * (_sigmoid(z) - self._y)
        g = np.bincount(self._F.ravel(), weights=np.repeat(r, self._F.shape[1]), minlength=self.M + 1)
        return g[:-1]

    def exact_hessian(self, model, cap=HESSIAN_CAP):
        _check_cap(self.M, cap)
        z = self._logits(self._ext(model), self._F)
        p = _sigmoid(z)
        A = np.zeros((self._F.shape[0], self.M + 1))
        np.add.at(A, (np.arange(self._F.shape[0])[:, None], self._F), 1.0)
        A = A[:, :-1]
        return A.T @ (A * (self._w * p * (1 - p))[:, None])

    def train_loss(self, model):
        """Mean per-sample cross-entropy on the fixed evaluation subset."""
        F = self._F[self._eval]
        z = self._logits(self._ext(model), F)
        return float(np.mean(_bce(z, self._y[self._eval])))

    def test_scores(self, model):
        if self._F_test is None:
            return None
        return _sigmoid(self._logits(self._ext(model), self._F_test)), self._y_test

    def pooled_batch(self, rng, size):
        if self._y.size == 0:
            raise StructuralError("no pooled samples")
        return rng.integers(0, self._y.size, size=size)

    def pooled_gradient(self, model, batch):
        batch = np.asarray(batch)
        if batch.size == 0:
            raise StructuralError("empty batch")
        F = self._F[batch]
        r = _sigmoid(self._logits(self._ext(model), F)) - self._y[batch]
        g = np.bincount(F.ravel(), weights=np.repeat(r, F.shape[1]), minlength=self.M + 1)
        return g[:-1] / batch.size


# --------------------------------------------------------------------------- functional surface

def stochastic_gradient(task: Task, client: ClientDataset, submodel: SparseUpdate, batch) -> SparseUpdate:
    """Batch-mean ``grad F`` at the client's submodel; support is ``S(i)``.

    ``submodel`` carries the parameter values on ``S(i)``. ``batch`` is a
    list of samples (``(features, label)`` for LR, noise draws ``xi`` for
    quadratics).
    """
    S = client.index_set.indices
    if not np.array_equal(submodel.indices, S):
        raise StructuralError("submodel support must equal the client's index set")
    if len(batch) == 0:
        raise StructuralError("empty batch")
    x_local = submodel.values
    if isinstance(task, SparseLRTask):
        g = task.gradient_for_samples(client, x_local, batch)
    else:
        g = task.local_gradient(client.client_id, x_local, np.asarray(batch, dtype=np.float64))
    return SparseUpdate(S, g, task.M)


def exact_gradient(task: Task, model: np.ndarray) -> np.ndarray:
    return task.exact_gradient(np.asarray(model, dtype=np.float64))


def exact_hessian(task: Task, model: np.ndarray | None = None, cap: int = HESSIAN_CAP) -> np.ndarray:
    model = np.zeros(task.M) if model is None else np.asarray(model, dtype=np.float64)
    return task.exact_hessian(model, cap=cap)
