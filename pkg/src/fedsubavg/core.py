"""Value types for full models, submodels and index-aligned sparse arithmetic.

A full model is a plain ``float64`` numpy array of length ``M``. Everything a
client touches is addressed through an :class:`IndexSet`; everything a client
sends back is a :class:`SparseUpdate`. Reductions over several updates always
run left to right in list order, which callers keep in ascending client id.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, StructuralError

__all__ = [
    "IndexSet",
    "SparseUpdate",
    "FeatureHeatTable",
    "Preconditioner",
    "align_sum",
    "build_heat_table",
    "build_preconditioner",
    "check_parameter_vector",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def check_parameter_vector(values: np.ndarray, M: int) -> np.ndarray:
    """Validate a dense model vector: right length, finite entries."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != M:
        raise StructuralError(f"parameter vector has shape {values.shape}, expected ({M},)")
    if not np.all(np.isfinite(values)):
        raise StructuralError("parameter vector contains non-finite entries")
    return values


class IndexSet:
    """Strictly increasing, duplicate-free indices in ``[0, M)``."""

    __slots__ = ("indices", "M")

    def __init__(self, indices: Iterable[int], M: int):
        arr = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices,
                                   dtype=np.int64))
        if arr.size and (arr[0] < 0 or arr[-1] >= M):
            raise StructuralError(f"index set entries must lie in [0, {M})")
        self.indices = _frozen(arr)
        self.M = int(M)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __iter__(self):
        return (int(i) for i in self.indices)

    def __contains__(self, m: int) -> bool:
        pos = np.searchsorted(self.indices, m)
        return bool(pos < self.indices.size and self.indices[pos] == m)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IndexSet):
            return NotImplemented
        return self.M == other.M and np.array_equal(self.indices, other.indices)

    def __hash__(self) -> int:
        return hash((self.M, self.indices.tobytes()))

    def __repr__(self) -> str:
        return f"IndexSet({self.indices.tolist()}, M={self.M})"


class SparseUpdate:
    """Index -> delta map, stored as sorted parallel arrays.

    Equality is defined over the implied dense vector, so explicitly stored
    zeros and absent entries compare equal.
    """

    __slots__ = ("indices", "values", "M")

    def __init__(self, indices: Sequence[int] | np.ndarray, values: Sequence[float] | np.ndarray, M: int):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        val = np.asarray(values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise StructuralError("indices and values differ in length")
        if idx.size:
            if idx.min() < 0 or idx.max() >= M:
                raise StructuralError(f"update index outside [0, {M})")
            if np.any(np.diff(idx) <= 0):
                order = np.argsort(idx, kind="stable")
                idx, val = idx[order], val[order]
                if np.any(np.diff(idx) == 0):
                    raise StructuralError("duplicate index in sparse update")
        self.indices = _frozen(idx)
        self.values = _frozen(val)
        self.M = int(M)

    @classmethod
    def trusted(cls, indices: np.ndarray, values: np.ndarray, M: int) -> "SparseUpdate":
        """Skip validation; ``indices`` must already be sorted, unique and in range."""
        obj = cls.__new__(cls)
        obj.indices = _frozen(np.asarray(indices, dtype=np.int64))
        obj.values = _frozen(np.asarray(values, dtype=np.float64))
        obj.M = int(M)
        return obj

    @classmethod
    def from_dict(cls, entries: Mapping[int, float], M: int) -> "SparseUpdate":
        keys = sorted(entries)
        return cls(keys, [entries[k] for k in keys], M)

    @classmethod
    def empty(cls, M: int) -> "SparseUpdate":
        return cls(np.empty(0, np.int64), np.empty(0), M)

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.M)
        out[self.indices] = self.values
        return out

    def items(self):
        return zip(self.indices.tolist(), self.values.tolist())

    def __getitem__(self, m: int) -> float:
        pos = np.searchsorted(self.indices, m)
        if pos < self.indices.size and self.indices[pos] == m:
            return float(self.values[pos])
        return 0.0

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return self.M == other.M and np.array_equal(self.to_dense(), other.to_dense())

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"SparseUpdate({self.to_dict()}, M={self.M})"


def align_sum(updates: Sequence[SparseUpdate], M: int | None = None) -> SparseUpdate:
    """Index-aligned sum of sparse updates.

    Entries are accumulated in list order. Indices absent from every input are
    absent from the result.
    """
    if not updates:
        return SparseUpdate.empty(0 if M is None else M)
    size = updates[0].M if M is None else M
    for u in updates:
        if u.M != size:
            raise StructuralError(f"update of size {u.M} cannot be aligned with size {size}")
    acc = np.zeros(size)
    touched = np.zeros(size, dtype=bool)
    for u in updates:
        acc[u.indices] += u.values
        touched[u.indices] = True
    support = np.flatnonzero(touched)
    return SparseUpdate.trusted(support, acc[support], size)


class FeatureHeatTable:
    """Per-parameter client counts ``n_m`` and the derived heat dispersion.

    ``counts`` is integer for exact tables; estimated tables (randomized
    response) carry real counts and a float dispersion.
    """

    __slots__ = ("counts", "N", "n_min", "n_max", "dispersion")

    def __init__(self, counts: np.ndarray, N: int):
        counts = np.asarray(counts)
        if counts.ndim != 1:
            raise StructuralError("counts must be one-dimensional")
        if np.any(counts < 0):
            raise StructuralError("counts must be non-negative")
        used = counts[counts > 0]
        if used.size == 0:
            raise ConfigError("no parameter is held by any client; dispersion undefined")
        if np.issubdtype(counts.dtype, np.integer):
            counts = counts.astype(np.int64)
            self.n_min = int(used.min())
            self.n_max = int(used.max())
            self.dispersion: Fraction | float = Fraction(self.n_max, self.n_min)
        else:
            counts = counts.astype(np.float64)
            self.n_min = float(used.min())
            self.n_max = float(used.max())
            self.dispersion = self.n_max / self.n_min
        if self.n_max > N:
            raise StructuralError(f"count {self.n_max} exceeds client total {N}")
        self.counts = _frozen(counts)
        self.N = int(N)

    @property
    def M(self) -> int:
        return int(self.counts.size)

    @property
    def in_use(self) -> np.ndarray:
        return self.counts > 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureHeatTable):
            return NotImplemented
        return self.N == other.N and np.array_equal(self.counts, other.counts)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"FeatureHeatTable(M={self.M}, N={self.N}, n_min={self.n_min}, "
                f"n_max={self.n_max}, dispersion={self.dispersion})")


def build_heat_table(index_sets: Sequence[IndexSet], M: int, N: int | None = None) -> FeatureHeatTable:
    """Count, for each parameter, how many clients hold it in their submodel."""
    counts = np.zeros(M, dtype=np.int64)
    for s in index_sets:
        if s.M != M:
            raise StructuralError(f"index set declared for M={s.M}, expected {M}")
        counts[s.indices] += 1
    return FeatureHeatTable(counts, len(index_sets) if N is None else N)


class Preconditioner:
    """Positive diagonal ``D``; entry ``m`` is ``N / n_m`` or its weighted form."""

    __slots__ = ("diag",)

    def __init__(self, diag: np.ndarray):
        diag = np.asarray(diag, dtype=np.float64)
        if diag.ndim != 1 or np.any(~np.isfinite(diag)) or np.any(diag <= 0):
            raise StructuralError("preconditioner diagonal must be finite and positive")
        self.diag = _frozen(diag)

    @classmethod
    def identity(cls, M: int) -> "Preconditioner":
        return cls(np.ones(M))

    @property
    def M(self) -> int:
        return int(self.diag.size)

    def sqrt(self) -> np.ndarray:
        return np.sqrt(self.diag)

    def __repr__(self) -> str:
        return f"Preconditioner(M={self.M}, min={self.diag.min():g}, max={self.diag.max():g})"


def build_preconditioner(
    heat: FeatureHeatTable,
    N: int | None = None,
    weights: Sequence[float] | None = None,
    index_sets: Sequence[IndexSet] | None = None,
    required: Iterable[int] | None = None,
) -> Preconditioner:
    """Diagonal correction coefficients.

    Unweighted: ``N / n_m``. Weighted: ``sum_i w_i / sum_{j: m in S(j)} w_j``,
    which needs ``index_sets`` to know who holds ``m``. Parameters held by no
    client are never updated; their entry is set to 1. Indices listed in
    ``required`` must be held by at least one client.
    """
    N = heat.N if N is None else int(N)
    counts = heat.counts
    in_use = counts > 0
    if required is not None:
        req = np.asarray(list(required), dtype=np.int64)
        orphans = req[counts[req] <= 0]
        if orphans.size:
            raise StructuralError(f"parameters {orphans.tolist()[:10]} are held by no client")
    if weights is None:
        diag = np.ones(heat.M)
        diag[in_use] = N / counts[in_use]
        return Preconditioner(diag)

    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (N,) or np.any(w <= 0):
        raise ConfigError(f"weights must be {N} positive numbers")
    if index_sets is None or len(index_sets) != N:
        raise ConfigError("weighted preconditioner needs the N client index sets")
    held = np.zeros(heat.M)
    for wi, s in zip(w, index_sets):
        held[s.indices] += wi
    total = float(w.sum())
    expected_use = held > 0
    if not np.array_equal(expected_use, in_use):
        raise StructuralError("index sets disagree with the heat table")
    diag = np.ones(heat.M)
    diag[expected_use] = total / held[expected_use]
    return Preconditioner(diag)
