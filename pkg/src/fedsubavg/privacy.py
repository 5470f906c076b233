"""Private estimation of per-parameter client counts.

Two mechanisms, both simulated at the arithmetic level:

* ``secure_count``: each client uploads its 0/1 indicator vector plus a
  pairwise mask; masks cancel modulo 2**32, so the server learns only the sum.
* randomized response: each bit is reported truthfully with probability
  ``p`` and flipped otherwise; the server debiases the summed reports with
  ``(c - (1 - p) N) / (2p - 1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FeatureHeatTable, IndexSet
from .errors import ConfigError, StructuralError
from .rng import child_rng

__all__ = [
    "RRConfig",
    "RREstimate",
    "indicator_vector",
    "secure_count",
    "masked_uploads",
    "rr_encode",
    "rr_estimate",
    "rr_heat_table",
]

log = logging.getLogger(__name__)

MODULUS = 1 << 32


@dataclass(frozen=True)
class RRConfig:
    p: float = 0.9

    def __post_init__(self):
        if not 0.5 < self.p <= 1.0:
            raise ConfigError(f"truth-report probability must lie in (0.5, 1], got {self.p}")


@dataclass(frozen=True)
class RREstimate:
    raw: np.ndarray       # unbiased estimate before clamping
    counts: np.ndarray    # clamped to [1, N]
    clamped: np.ndarray   # bool, True where clamping changed the value
    N: int

    def heat_table(self) -> FeatureHeatTable:
        return FeatureHeatTable(self.counts, self.N)


def indicator_vector(index_set: IndexSet) -> np.ndarray:
    """0/1 vector of length M with ones exactly on the index set."""
    bits = np.zeros(index_set.M, dtype=np.uint8)
    bits[index_set.indices] = 1
    return bits


def _stack(indicators: Sequence[np.ndarray]) -> np.ndarray:
    if len(indicators) == 0:
        raise StructuralError("no indicator vectors")
    M = len(indicators[0])
    for v in indicators:
        if len(v) != M:
            raise StructuralError("indicator vectors differ in length")
    bits = np.asarray(np.stack(indicators), dtype=np.int64)
    if np.any((bits != 0) & (bits != 1)):
        raise StructuralError("indicator vectors must be 0/1")
    return bits


def masked_uploads(indicators: Sequence[np.ndarray], seed: int = 0) -> np.ndarray:
    """What each client actually sends: its bits plus pairwise masks mod 2**32.

    For every pair ``i < j`` a mask ``r_ij`` is drawn; client ``i`` adds it
    and client ``j`` subtracts it.
    """
    bits = _stack(indicators)
    N, M = bits.shape
    if N >= MODULUS:
        raise ConfigError("too many clients for a 32-bit modulus")
    up = bits.astype(np.uint64) % MODULUS
    for i in range(N):
        for j in range(i + 1, N):
            r = child_rng(seed, "mask", i, j).integers(0, MODULUS, size=M, dtype=np.uint64)
            up[i] = (up[i] + r) % MODULUS
            up[j] = (up[j] + (MODULUS - r)) % MODULUS
    return up


def secure_count(indicators: Sequence[np.ndarray], seed: int = 0) -> FeatureHeatTable:
    """Sum of indicator vectors recovered from masked uploads."""
    up = masked_uploads(indicators, seed)
    total = np.zeros(up.shape[1], dtype=np.uint64)
    for row in up:
        total = (total + row) % MODULUS
    return FeatureHeatTable(total.astype(np.int64), up.shape[0])


def rr_encode(bits, cfg: RRConfig, rng: np.random.Generator):
    """Report each bit truthfully with probability ``p``; scalar in, scalar out."""
    arr = np.asarray(bits)
    if np.any((arr != 0) & (arr != 1)):
        raise StructuralError("randomized response encodes 0/1 bits")
    keep = rng.random(arr.shape) < cfg.p
    out = np.where(keep, arr, 1 - arr).astype(np.uint8)
    return int(out) if out.ndim == 0 else out


def rr_estimate(randomized_counts, N: int, cfg: RRConfig) -> RREstimate:
    """Debias summed randomized reports and clamp to ``[1, N]``."""
    c = np.asarray(randomized_counts, dtype=np.float64)
    if np.any(c < 0) or np.any(c > N):
        raise StructuralError("randomized counts must lie in [0, N]")
    denom = 2.0 * cfg.p - 1.0
    if denom <= 0:
        raise ConfigError("2p - 1 must be positive")
    raw = (c - (1.0 - cfg.p) * N) / denom
    counts = np.clip(raw, 1.0, float(N))
    clamped = counts != raw
    if clamped.any():
        log.warning("clamped %d of %d estimated counts to [1, %d]", int(clamped.sum()), c.size, N)
    return RREstimate(raw, counts, clamped, int(N))


def rr_heat_table(index_sets: Sequence[IndexSet], cfg: RRConfig, seed: int = 0) -> RREstimate:
    """Clients randomize their indicators; the server sums and debiases.

    Each client encodes with its own child stream, so the outcome does not
    depend on client processing order.
    """
    if not index_sets:
        raise StructuralError("no clients")
    M = index_sets[0].M
    total = np.zeros(M, dtype=np.int64)
    for cid, s in enumerate(index_sets):
        total += rr_encode(indicator_vector(s), cfg, child_rng(seed, "rr", cid))
    return rr_estimate(total, len(index_sets), cfg)
