"""Client datasets: synthetic partitions with controlled heat dispersion,
MovieLens-1M ingestion, and a line-oriented partition file format.

Partition file format (one client per line, tab separated)::

    # fedsubavg-partition M=<M> dense=<comma separated dense indices>
    <client_id>\t<weight>\t<i0,i1,...>\t<train blob>|<test blob>

A blob is a ``;``-separated list of samples, each written ``label:f0,f1,...``.
Weights are written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FeatureHeatTable, IndexSet, build_heat_table
from .errors import ConfigError, MalformedInputError, StructuralError
from .rng import child_rng

# A sample is (sorted tuple of active feature indices, binary label).
Sample = tuple[tuple[int, ...], int]

__all__ = [
    "Sample",
    "ClientDataset",
    "PartitionSpec",
    "MovieLensLayout",
    "generate_synthetic",
    "ingest_movielens",
    "dataset_stats",
    "feature_dispersion",
    "export_partition",
    "import_partition",
]


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's local data and the submodel it induces."""

    client_id: int
    samples: tuple[Sample, ...]
    index_set: IndexSet
    weight: float
    test_samples: tuple[Sample, ...] = ()

    def __post_init__(self):
        if not self.weight > 0:
            raise ConfigError(f"client {self.client_id}: weight must be positive")

    @classmethod
    def from_samples(
        cls,
        client_id: int,
        samples: Sequence[Sample],
        M: int,
        dense_indices: Iterable[int] = (),
        weight: float | None = None,
        test_samples: Sequence[Sample] = (),
    ) -> "ClientDataset":
        """Derive the index set from the features the samples reference."""
        touched = {f for feats, _ in samples for f in feats}
        touched.update(dense_indices)
        return cls(
            client_id=client_id,
            samples=tuple(samples),
            index_set=IndexSet(sorted(touched), M),
            weight=float(len(samples)) if weight is None else float(weight),
            test_samples=tuple(test_samples),
        )

    @property
    def num_samples(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class PartitionSpec:
    """Recipe for a synthetic sparse-LR partition.

    ``layout`` is ``"powerlaw"`` (heat follows a truncated power law),
    ``"full"`` (every client holds every feature) or ``"example1"`` (two
    parameters, the first held by client 0 only, no bias).
    """

    N: int
    V: int
    target_dispersion: float = 10.0
    samples_per_client: int = 20
    features_per_sample: int = 2
    powerlaw_exponent: float = 1.0
    layout: str = "powerlaw"
    include_bias: bool = True
    test_samples_per_client: int = 5
    weight_scale: float = 1.0
    true_bias: float = 0.0
    seed: int = 0

    @property
    def M(self) -> int:
        return self.V + (1 if self.has_bias else 0)

    @property
    def has_bias(self) -> bool:
        return self.include_bias and self.layout != "example1"

    @property
    def bias_index(self) -> int | None:
        return self.V if self.has_bias else None


def _draw_sample(rng: np.random.Generator, held: np.ndarray, k: int) -> tuple[int, ...]:
    take = min(k, held.size)
    return tuple(sorted(int(f) for f in rng.choice(held, size=take, replace=False)))


def _label(rng: np.random.Generator, feats: tuple[int, ...], w_true: np.ndarray, b_true: float) -> int:
    logit = b_true + float(w_true[list(feats)].sum())
    return int(rng.random() < 1.0 / (1.0 + math.exp(-logit)))


def _holdings(spec: PartitionSpec, rng: np.random.Generator) -> list[np.ndarray]:
    N, V = spec.N, spec.V
    if spec.layout == "full":
        return [np.arange(V) for _ in range(N)]
    if spec.layout == "example1":
        if V != 2:
            raise ConfigError("example1 layout has exactly two parameters")
        return [np.array([0, 1])] + [np.array([1]) for _ in range(N - 1)]
    if spec.layout != "powerlaw":
        raise ConfigError(f"unknown layout {spec.layout!r}")

    target = spec.target_dispersion
    floor = 1.0 / target
    p = np.clip((np.arange(V) + 1.0) ** (-spec.powerlaw_exponent), floor, 1.0)
    hold = rng.random((N, V)) < p[None, :]
    empty = ~hold.any(axis=1)
    hold[empty, 0] = True

    # Raise every cold feature to the floor count so n_min hits N/target.
    n_floor = max(1, int(round(N / target)))
    counts = hold.sum(axis=0)
    for m in np.flatnonzero(counts < n_floor):
        missing = n_floor - counts[m]
        candidates = np.flatnonzero(~hold[:, m])
        hold[rng.choice(candidates, size=missing, replace=False), m] = True
    return [np.flatnonzero(row) for row in hold]


def generate_synthetic(spec: PartitionSpec) -> tuple[list[ClientDataset], FeatureHeatTable]:
    """Build a deterministic synthetic partition and its heat table.

    Labels come from a planted logistic model with Gaussian feature weights.
    Every feature a client holds appears in at least one of its training
    samples, so the index set equals the held features plus the bias.
    """
    if spec.N < 2 and spec.layout != "example1" or spec.V < 2:
        raise ConfigError("synthetic partitions need N >= 2 and V >= 2")
    if spec.N < 1:
        raise ConfigError("need at least one client")
    if spec.layout == "powerlaw" and not (1.0 <= spec.target_dispersion <= spec.N):
        raise ConfigError(
            f"target dispersion {spec.target_dispersion} infeasible for N={spec.N} (need 1 <= d <= N)")
    if spec.features_per_sample < 1 or spec.samples_per_client < 1:
        raise ConfigError("samples_per_client and features_per_sample must be >= 1")

    rng = child_rng(spec.seed, "partition")
    held_sets = _holdings(spec, rng)
    label_rng = child_rng(spec.seed, "labels")
    w_true = label_rng.normal(0.0, spec.weight_scale, size=spec.V)
    dense = () if spec.bias_index is None else (spec.bias_index,)
    k = spec.features_per_sample

    clients = []
    for cid, held in enumerate(held_sets):
        crng = child_rng(spec.seed, "samples", cid)
        order = crng.permutation(held)
        n_cover = math.ceil(order.size / k)
        feats_list = []
        for c in range(n_cover):
            chunk = set(int(f) for f in order[c * k:(c + 1) * k])
            while len(chunk) < min(k, held.size):
                chunk.add(int(crng.choice(held)))
            feats_list.append(tuple(sorted(chunk)))
        for _ in range(max(0, spec.samples_per_client - n_cover)):
            feats_list.append(_draw_sample(crng, held, k))
        samples = [(f, _label(crng, f, w_true, spec.true_bias)) for f in feats_list]
        test = []
        for _ in range(spec.test_samples_per_client):
            f = _draw_sample(crng, held, k)
            test.append((f, _label(crng, f, w_true, spec.true_bias)))
        clients.append(ClientDataset.from_samples(cid, samples, spec.M, dense, test_samples=test))

    heat = build_heat_table([c.index_set for c in clients], spec.M)
    if spec.layout == "powerlaw":
        realized = float(heat.dispersion)
        if not (spec.target_dispersion / 2 <= realized <= spec.target_dispersion * 2):
            raise ConfigError(
                f"realized dispersion {realized:g} not within x2 of target {spec.target_dispersion:g}")
    return clients, heat


# --------------------------------------------------------------------------- MovieLens

AGE_CODES = (1, 18, 25, 35, 45, 50, 56)
GENDERS = ("F", "M")


@dataclass(frozen=True)
class MovieLensLayout:
    """One-hot vocabulary: gender, age, movie, gender x movie, age x movie, bias."""

    movie_ids: tuple[int, ...]
    movie_pos: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.movie_pos:
            object.__setattr__(self, "movie_pos", {m: i for i, m in enumerate(self.movie_ids)})

    @property
    def n_movies(self) -> int:
        return len(self.movie_ids)

    @property
    def gender_offset(self) -> int:
        return 0

    @property
    def age_offset(self) -> int:
        return len(GENDERS)

    @property
    def movie_offset(self) -> int:
        return self.age_offset + len(AGE_CODES)

    @property
    def gender_movie_offset(self) -> int:
        return self.movie_offset + self.n_movies

    @property
    def age_movie_offset(self) -> int:
        return self.gender_movie_offset + len(GENDERS) * self.n_movies

    @property
    def V(self) -> int:
        return self.age_movie_offset + len(AGE_CODES) * self.n_movies

    @property
    def bias_index(self) -> int:
        return self.V

    @property
    def M(self) -> int:
        return self.V + 1

    def features(self, gender: str, age: int, movie_id: int) -> tuple[int, ...]:
        g = GENDERS.index(gender)
        a = AGE_CODES.index(age)
        mv = self.movie_pos[movie_id]
        return (
            self.gender_offset + g,
            self.age_offset + a,
            self.movie_offset + mv,
            self.gender_movie_offset + g * self.n_movies + mv,
            self.age_movie_offset + a * self.n_movies + mv,
        )

    def describe(self) -> dict:
        return {
            "n_movies": self.n_movies,
            "gender_offset": self.gender_offset,
            "age_offset": self.age_offset,
            "movie_offset": self.movie_offset,
            "gender_movie_offset": self.gender_movie_offset,
            "age_movie_offset": self.age_movie_offset,
            "bias_index": self.bias_index,
            "M": self.M,
        }


def _read_rows(path: Path, n_fields: int) -> list[tuple[int, list[str]]]:
    text = Path(path).read_bytes().decode("latin-1")
    rows, bad = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != n_fields:
            bad.append(lineno)
            continue
        rows.append((lineno, parts))
    if bad:
        raise MalformedInputError(f"{path}: wrong field count", bad)
    return rows


def ingest_movielens(
    ratings_path,
    users_path,
    movies_path,
    seed: int = 0,
    test_fraction: float = 0.2,
    return_layout: bool = False,
):
    """Read MovieLens-1M ``::``-delimited files into one client per user.

    Ratings of 4 and 5 are positive. A uniformly random ``test_fraction`` of
    all ratings (drawn with ``seed``) becomes held-out test data; index sets
    and the heat table are built from the training part.
    """
    for p in (ratings_path, users_path, movies_path):
        if not Path(p).is_file():
            raise FileNotFoundError(p)

    movie_rows = _read_rows(movies_path, 3)
    bad = []
    movie_ids = []
    for lineno, parts in movie_rows:
        try:
            movie_ids.append(int(parts[0]))
        except ValueError:
            bad.append(lineno)
    if bad:
        raise MalformedInputError(f"{movies_path}: bad movie id", bad)
    layout = MovieLensLayout(tuple(sorted(movie_ids)))

    users = {}
    for lineno, parts in _read_rows(users_path, 5):
        try:
            uid, gender, age = int(parts[0]), parts[1], int(parts[2])
        except ValueError:
            bad.append(lineno)
            continue
        if gender not in GENDERS or age not in AGE_CODES:
            bad.append(lineno)
            continue
        users[uid] = (gender, age)
    if bad:
        raise MalformedInputError(f"{users_path}: bad user row", bad)

    per_user: dict[int, list[Sample]] = {}
    for lineno, parts in _read_rows(ratings_path, 4):
        try:
            uid, mid, rating = int(parts[0]), int(parts[1]), int(parts[2])
            int(parts[3])
        except ValueError:
            bad.append(lineno)
            continue
        if uid not in users or mid not in layout.movie_pos or not 1 <= rating <= 5:
            bad.append(lineno)
            continue
        gender, age = users[uid]
        per_user.setdefault(uid, []).append((layout.features(gender, age, mid), int(rating >= 4)))
    if bad:
        raise MalformedInputError(f"{ratings_path}: bad rating row", bad)

    total = sum(len(v) for v in per_user.values())
    rng = child_rng(seed, "movielens-split")
    is_test = np.zeros(total, dtype=bool)
    is_test[rng.permutation(total)[: int(round(test_fraction * total))]] = True

    clients = []
    pos = 0
    for cid, uid in enumerate(sorted(per_user)):
        samples = per_user[uid]
        flags = is_test[pos:pos + len(samples)]
        pos += len(samples)
        train = [s for s, t in zip(samples, flags) if not t]
        test = [s for s, t in zip(samples, flags) if t]
        clients.append(ClientDataset.from_samples(
            cid, train, layout.M, (layout.bias_index,),
            weight=max(len(train), 1), test_samples=test))
    heat = build_heat_table([c.index_set for c in clients], layout.M)
    if return_layout:
        return clients, heat, layout
    return clients, heat


def feature_dispersion(clients: Sequence[ClientDataset], V: int, include_test: bool = True) -> float:
    """Feature heat dispersion: max/min client count over features in use."""
    counts = np.zeros(V, dtype=np.int64)
    for c in clients:
        seen = {f for feats, _ in c.samples for f in feats}
        if include_test:
            seen.update(f for feats, _ in c.test_samples for f in feats)
        counts[sorted(seen)] += 1
    used = counts[counts > 0]
    return float(used.max()) / float(used.min())


def dataset_stats(clients: Sequence[ClientDataset], V: int) -> dict:
    n_samples = sum(len(c.samples) + len(c.test_samples) for c in clients)
    return {
        "clients": len(clients),
        "samples": n_samples,
        "samples_per_client": n_samples / len(clients),
        "feature_heat_dispersion": feature_dispersion(clients, V),
    }


# --------------------------------------------------------------------------- partition files

def _blob(samples: Sequence[Sample]) -> str:
    return ";".join(f"{y}:{','.join(str(f) for f in feats)}" for feats, y in samples)


def _unblob(text: str) -> list[Sample]:
    out = []
    for item in filter(None, text.split(";")):
        y, _, feats = item.partition(":")
        out.append((tuple(int(f) for f in feats.split(",") if f), int(y)))
    return out


def export_partition(clients: Sequence[ClientDataset], path, dense_indices: Iterable[int] = ()) -> None:
    if not clients:
        raise StructuralError("cannot export an empty partition")
    M = clients[0].index_set.M
    lines = [f"# fedsubavg-partition M={M} dense={','.join(str(d) for d in dense_indices)}"]
    for c in clients:
        idx = ",".join(str(i) for i in c.index_set)
        lines.append(f"{c.client_id}\t{c.weight!r}\t{idx}\t{_blob(c.samples)}|{_blob(c.test_samples)}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_partition(path) -> list[ClientDataset]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# fedsubavg-partition"):
        raise MalformedInputError(f"{path}: missing header", [1])
    header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    M = int(header["M"])
    clients, bad = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or "|" not in parts[3]:
            bad.append(lineno)
            continue
        try:
            train_blob, test_blob = parts[3].split("|", 1)
            clients.append(ClientDataset(
                client_id=int(parts[0]),
                samples=tuple(_unblob(train_blob)),
                index_set=IndexSet([int(i) for i in parts[2].split(",") if i], M),
                weight=float(parts[1]),
                test_samples=tuple(_unblob(test_blob)),
            ))
        except (ValueError, StructuralError, ConfigError):
            bad.append(lineno)
    if bad:
        raise MalformedInputError(f"{path}: unparseable client rows", bad)
    return clients
