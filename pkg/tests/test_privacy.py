import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsubavg.core import IndexSet, build_heat_table
from fedsubavg.errors import ConfigError, StructuralError
from fedsubavg.privacy import (
    RRConfig,
    indicator_vector,
    masked_uploads,
    rr_encode,
    rr_estimate,
    rr_heat_table,
    secure_count,
)


def test_indicator_vector_support():
    s = IndexSet([1, 3], 5)
    assert indicator_vector(s).tolist() == [0, 1, 0, 1, 0]


def test_secure_count_fig1():
    sets = [IndexSet(s, 2) for s in ([0, 1], [0, 1], [1])]
    assert secure_count([indicator_vector(s) for s in sets]).counts.tolist() == [2, 3]


def test_secure_count_single_client():
    v = indicator_vector(IndexSet([0, 2], 4))
    assert secure_count([v]).counts.tolist() == v.tolist()


def test_secure_count_50_clients_exact():
    rng = np.random.default_rng(0)
    sets = [IndexSet(np.flatnonzero(rng.random(32) < 0.3), 32) for _ in range(50)]
    ind = [indicator_vector(s) for s in sets]
    assert secure_count(ind, seed=5) == build_heat_table(sets, 32)
    assert np.array_equal(secure_count(ind, seed=5).counts, np.sum(ind, axis=0))


def test_masked_uploads_hide_bits():
    ind = [indicator_vector(IndexSet([0], 3)) for _ in range(4)]
    up = masked_uploads(ind, seed=1)
    # every upload except possibly the last looks nothing like a 0/1 vector
    assert np.all(up[:-1] > 1)


def test_secure_count_length_mismatch():
    with pytest.raises(StructuralError):
        secure_count([np.array([1, 0]), np.array([1, 0, 1])])
    with pytest.raises(StructuralError):
        secure_count([])


def test_rr_config_validation():
    for p in (0.5, 0.3, 1.01):
        with pytest.raises(ConfigError):
            RRConfig(p)


def test_rr_identity_at_p1():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, size=100)
    assert np.array_equal(rr_encode(bits, RRConfig(1.0), rng), bits)
    assert rr_encode(1, RRConfig(1.0), rng) == 1


@pytest.mark.parametrize("bit,expected", [(1, 0.9), (0, 0.1)])
def test_rr_frequency(bit, expected):
    rng = np.random.default_rng(42)
    out = rr_encode(np.full(100_000, bit), RRConfig(0.9), rng)
    assert abs(out.mean() - expected) <= 0.01


def test_rr_estimate_expectation_arithmetic():
    est = rr_estimate([34.0], 100, RRConfig(0.9))
    assert est.raw[0] == pytest.approx(30.0, rel=1e-12)


def test_rr_estimate_p1_identity():
    c = np.array([0.0, 3.0, 7.0])
    est = rr_estimate(c, 10, RRConfig(1.0))
    assert np.array_equal(est.raw, c)


def test_rr_estimate_noise_floor_clamped(caplog):
    with caplog.at_level(logging.WARNING, logger="fedsubavg.privacy"):
        est = rr_estimate([10.0], 100, RRConfig(0.9))
    assert est.raw[0] == pytest.approx(0.0, abs=1e-12)
    assert est.counts[0] == 1.0 and est.clamped[0]
    assert "clamped" in caplog.text


def test_rr_estimate_bounds():
    with pytest.raises(StructuralError):
        rr_estimate([11.0], 10, RRConfig(0.9))
    est = rr_estimate([10.0], 10, RRConfig(0.9))
    assert est.counts[0] == 10.0 and est.clamped[0]


@settings(max_examples=30)
@given(st.integers(2, 60), st.floats(0.55, 1.0), st.data())
def test_rr_estimate_clamped_range(N, p, data):
    c = data.draw(st.lists(st.integers(0, N), min_size=1, max_size=8))
    est = rr_estimate(c, N, RRConfig(p))
    assert np.all((est.counts >= 1) & (est.counts <= N))
    assert np.array_equal(est.clamped, est.counts != est.raw)
    # debiasing inverts the expectation map c = p n + (1 - p)(N - n)
    recon = p * est.raw + (1 - p) * (N - est.raw)
    assert np.allclose(recon, c, rtol=1e-9, atol=1e-9)


def test_rr_unbiased_small():
    rng = np.random.default_rng(7)
    N, n_true, trials, cfg = 200, np.array([5, 60, 180]), 4000, RRConfig(0.75)
    bits = (np.arange(N)[None, :] < n_true[:, None]).astype(np.uint8)
    raws = []
    for _ in range(trials):
        c = rr_encode(bits, cfg, rng).sum(axis=1)
        raws.append(rr_estimate(c, N, cfg).raw)
    raws = np.array(raws)
    se = raws.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(raws.mean(axis=0) - n_true) <= 3 * se)


def test_rr_heat_table_deterministic():
    sets = [IndexSet([0, 1], 3), IndexSet([1], 3), IndexSet([1, 2], 3)]
    a = rr_heat_table(sets, RRConfig(0.9), seed=3)
    b = rr_heat_table(sets, RRConfig(0.9), seed=3)
    assert np.array_equal(a.counts, b.counts)
    h = a.heat_table()
    assert h.N == 3 and np.all(h.counts >= 1)
