from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsubavg.core import (
    FeatureHeatTable,
    IndexSet,
    Preconditioner,
    SparseUpdate,
    align_sum,
    build_heat_table,
    build_preconditioner,
    check_parameter_vector,
)
from fedsubavg.errors import ConfigError, StructuralError

FIG1_SETS = [[0, 1], [0, 1], [1]]


def _sets(sets, M):
    return [IndexSet(s, M) for s in sets]


def test_index_set_sorted_unique():
    s = IndexSet([3, 1, 3, 0], 5)
    assert s.indices.tolist() == [0, 1, 3]
    assert 3 in s and 2 not in s
    assert len(s) == 3


def test_index_set_out_of_range():
    with pytest.raises(StructuralError):
        IndexSet([0, 5], 5)
    with pytest.raises(StructuralError):
        IndexSet([-1], 5)


def test_index_set_is_immutable():
    s = IndexSet([1, 2], 4)
    with pytest.raises(ValueError):
        s.indices[0] = 3


def test_parameter_vector_checks():
    assert check_parameter_vector([1.0, 2.0], 2).dtype == np.float64
    with pytest.raises(StructuralError):
        check_parameter_vector([1.0], 2)
    with pytest.raises(StructuralError):
        check_parameter_vector([1.0, np.nan], 2)


def test_sparse_update_rejects_duplicates_and_range():
    with pytest.raises(StructuralError):
        SparseUpdate([1, 1], [1.0, 2.0], 3)
    with pytest.raises(StructuralError):
        SparseUpdate([3], [1.0], 3)


def test_sparse_update_equality_ignores_stored_zeros():
    a = SparseUpdate.from_dict({0: 1.0, 2: 0.0}, 4)
    b = SparseUpdate.from_dict({0: 1.0}, 4)
    assert a == b
    assert a[2] == 0.0 and a[3] == 0.0


def test_align_sum_basic():
    out = align_sum([SparseUpdate.from_dict({0: 1.0, 2: 2.0}, 4), SparseUpdate.from_dict({2: 3.0}, 4)])
    assert out.to_dict() == {0: 1.0, 2: 5.0}


def test_align_sum_empty():
    assert align_sum([]).to_dict() == {}


def test_align_sum_fig1_index0():
    # the third client does not hold index 0 and sends nothing for it
    ups = [SparseUpdate.from_dict({0: 4.0}, 2), SparseUpdate.from_dict({0: 2.0}, 2), SparseUpdate.empty(2)]
    assert align_sum(ups).to_dict() == {0: 6.0}


def test_align_sum_size_mismatch():
    with pytest.raises(StructuralError):
        align_sum([SparseUpdate.empty(2), SparseUpdate.empty(3)])


def _updates(M=6):
    entry = st.dictionaries(st.integers(0, M - 1), st.integers(-1000, 1000).map(float), max_size=M)
    return st.lists(entry, min_size=0, max_size=6).map(lambda ds: [SparseUpdate.from_dict(d, M) for d in ds])


@given(_updates(), st.randoms())
def test_align_sum_permutation_exact_on_integers(ups, rnd):
    # integer-valued doubles add exactly, so any order gives identical bits
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    assert align_sum(ups, 6) == align_sum(shuffled, 6)


@given(st.lists(st.dictionaries(st.integers(0, 4), st.floats(-1e3, 1e3), max_size=5), max_size=6),
       st.randoms())
def test_align_sum_permutation_float_tolerance(dicts, rnd):
    ups = [SparseUpdate.from_dict(d, 5) for d in dicts]
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    a, b = align_sum(ups, 5), align_sum(shuffled, 5)
    assert a.indices.tolist() == b.indices.tolist()
    scale = sum(np.abs(u.to_dense()) for u in ups) if ups else np.zeros(5)
    assert np.all(np.abs(a.to_dense() - b.to_dense()) <= 1e-12 * np.maximum(scale, 1.0))


@given(_updates())
def test_align_sum_support_is_union(ups):
    out = align_sum(ups, 6)
    union = sorted({i for u in ups for i in u.indices.tolist()})
    assert out.indices.tolist() == union


def test_heat_table_fig1():
    heat = build_heat_table(_sets(FIG1_SETS, 2), 2)
    assert heat.counts.tolist() == [2, 3]
    assert (heat.n_min, heat.n_max) == (2, 3)
    assert heat.dispersion == Fraction(3, 2)


def test_heat_table_full_sets():
    heat = build_heat_table(_sets([[0, 1, 2]] * 5, 3), 3)
    assert heat.counts.tolist() == [5, 5, 5]
    assert heat.dispersion == 1


def test_heat_table_example1():
    heat = build_heat_table(_sets([[0, 1]] + [[1]] * 99, 2), 2)
    assert heat.counts.tolist() == [1, 100]
    assert heat.dispersion == 100


def test_heat_table_all_empty():
    with pytest.raises(ConfigError):
        build_heat_table(_sets([[], []], 3), 3)


def test_heat_table_count_above_N():
    with pytest.raises(StructuralError):
        FeatureHeatTable(np.array([3, 1]), 2)


def test_heat_table_ignores_unused_indices():
    heat = build_heat_table(_sets([[0], [0, 2]], 4), 4)
    assert (heat.n_min, heat.n_max) == (1, 2)
    assert heat.in_use.tolist() == [True, False, True, False]


@given(st.lists(st.lists(st.integers(0, 7), max_size=8), min_size=1, max_size=12).filter(
    lambda ss: any(ss)))
def test_heat_table_bounds(sets):
    heat = build_heat_table(_sets(sets, 8), 8)
    used = heat.counts[heat.counts > 0]
    assert 1 <= heat.n_min <= used.min() and used.max() <= heat.n_max <= len(sets)
    assert heat.dispersion == Fraction(heat.n_max, heat.n_min)


def test_preconditioner_fig1():
    heat = build_heat_table(_sets(FIG1_SETS, 2), 2)
    assert build_preconditioner(heat, 3).diag.tolist() == [1.5, 1.0]


def test_preconditioner_example1():
    heat = FeatureHeatTable(np.array([1, 100]), 100)
    assert build_preconditioner(heat, 100).diag.tolist() == [100.0, 1.0]


def test_preconditioner_weighted_fig1():
    sets = _sets(FIG1_SETS, 2)
    heat = build_heat_table(sets, 2)
    D = build_preconditioner(heat, 3, weights=[2, 1, 1], index_sets=sets)
    assert D.diag[0] == pytest.approx(4 / 3, rel=1e-15)
    assert D.diag[1] == 1.0


def test_preconditioner_required_orphan():
    heat = build_heat_table(_sets([[0], [0]], 3), 3)
    with pytest.raises(StructuralError):
        build_preconditioner(heat, required=[1])


def test_preconditioner_weighted_needs_sets():
    heat = build_heat_table(_sets(FIG1_SETS, 2), 2)
    with pytest.raises(ConfigError):
        build_preconditioner(heat, weights=[1, 1, 1])
    with pytest.raises(ConfigError):
        build_preconditioner(heat, weights=[1, -1, 1], index_sets=_sets(FIG1_SETS, 2))


def test_preconditioner_rejects_nonpositive():
    with pytest.raises(StructuralError):
        Preconditioner(np.array([1.0, 0.0]))


@settings(max_examples=60)
@given(st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=6), min_size=1, max_size=10))
def test_preconditioner_properties(sets):
    idx = _sets(sets, 6)
    heat = build_heat_table(idx, 6)
    N = len(sets)
    D = build_preconditioner(heat)
    used = heat.in_use
    assert np.all(D.diag >= 1.0)
    assert np.allclose(D.diag[used] / N, 1.0 / heat.counts[used], rtol=1e-15)
    assert np.all(D.diag[heat.counts == N] == 1.0)
    Dw = build_preconditioner(heat, weights=[1.0] * N, index_sets=idx)
    assert np.array_equal(Dw.diag, D.diag)
