import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from invr_lab import mips
from invr_lab.errors import DimensionMismatch, DuplicateId, EmptyIndex, UnknownId
from invr_lab.mips import MipsIndex

from oracles import brute_top_n


def as_pairs(hits):
    return [(h.id, h.score) for h in hits]


# -- build --------------------------------------------------------------------------


def test_build_single():
    assert len(mips.build({"a": (1.0, 0.0)})) == 1


def test_build_mixed_dims():
    with pytest.raises(DimensionMismatch):
        mips.build({"a": (1.0, 0.0), "b": (1.0, 0.0, 0.0)})


def test_build_empty_and_duplicates():
    with pytest.raises(EmptyIndex):
        mips.build({})
    with pytest.raises(DuplicateId):
        MipsIndex(["a", "a"], np.eye(2))


def test_build_thousand_random():
    rng = np.random.default_rng(0)
    idx = mips.build({k: v for k, v in enumerate(rng.normal(size=(1000, 16)))})
    assert len(idx) == 1000
    assert len(mips.top_n(idx, rng.normal(size=16), 5)) == 5


def test_index_is_frozen():
    idx = mips.build({"a": (1.0, 0.0)})
    with pytest.raises(ValueError):
        idx.vectors[0, 0] = 5.0


# -- top_n ----------------------------------------------------------------------------


def test_top_n_tie_broken_by_id():
    idx = mips.build({"a": (1, 0), "b": (0, 1), "c": (1, 1)})
    assert as_pairs(mips.top_n(idx, (1, 0), 2)) == [("a", 1.0), ("c", 1.0)]


def test_top_n_zero():
    idx = mips.build({"a": (1, 0), "b": (0, 1)})
    assert mips.top_n(idx, (1, 0), 0) == []


def test_top_n_negative_scores():
    idx = mips.build({"a": (-1, 0), "b": (-2, 0)})
    assert as_pairs(mips.top_n(idx, (1, 0), 1)) == [("a", -1.0)]


def test_top_n_clamps_to_size():
    idx = mips.build({"a": (1, 0), "b": (0, 1)})
    assert len(mips.top_n(idx, (1, 1), 10)) == 2


def test_top_n_query_dim_checked():
    idx = mips.build({"a": (1, 0)})
    with pytest.raises(DimensionMismatch):
        mips.top_n(idx, (1, 0, 0), 1)


# -- rank_of --------------------------------------------------------------------------


def test_rank_of_examples():
    idx = mips.build({"a": (1, 0), "b": (0, 1)})
    assert mips.rank_of(idx, (1, 0), "a") == 1
    assert mips.rank_of(idx, (1, 0), "b") == 2
    tie = mips.build({"a": (1, 0), "c": (1, 0)})
    assert (mips.rank_of(tie, (1, 0), "a"), mips.rank_of(tie, (1, 0), "c")) == (1, 2)


def test_rank_of_unknown():
    with pytest.raises(UnknownId):
        mips.rank_of(mips.build({"a": (1, 0)}), (1, 0), "z")


# -- properties -----------------------------------------------------------------------


int_instances = st.integers(1, 6).flatmap(
    lambda d: st.tuples(
        hnp.arrays(np.int64, st.tuples(st.integers(1, 60), st.just(d)), elements=st.integers(-3, 3)),
        hnp.arrays(np.int64, (d,), elements=st.integers(-3, 3)),
        st.integers(0, 70),
    )
)


@given(int_instances)
@settings(max_examples=150, deadline=None)
def test_top_n_matches_brute_force_with_ties(inst):
    """Small integer coordinates make ties frequent and scores exact."""
    vectors, query, n = inst
    entries = {k: vectors[k] for k in range(len(vectors))}
    idx = mips.build(entries)
    assert as_pairs(mips.top_n(idx, query, n)) == brute_top_n(entries, query, n)


@given(int_instances)
@settings(max_examples=80, deadline=None)
def test_rank_consistency(inst):
    vectors, query, _ = inst
    idx = mips.build({k: vectors[k] for k in range(len(vectors))})
    full = mips.top_n(idx, query, len(idx))
    for pos, hit in enumerate(full, start=1):
        assert mips.rank_of(idx, query, hit.id) == pos


@given(int_instances, st.sampled_from([0.25, 0.5, 2.0, 8.0]))
@settings(max_examples=80, deadline=None)
def test_positive_query_scaling_keeps_order(inst, c):
    vectors, query, n = inst
    idx = mips.build({k: vectors[k] for k in range(len(vectors))})
    a = [h.id for h in mips.top_n(idx, query, n)]
    b = [h.id for h in mips.top_n(idx, query * c, n)]
    assert a == b


def test_string_ids_tie_order():
    idx = mips.build({"b": (1, 0), "a": (1, 0), "c": (2, 0)})
    assert [h.id for h in mips.top_n(idx, (1, 0), 3)] == ["c", "a", "b"]


def test_batched_rows_match_single_queries():
    rng = np.random.default_rng(3)
    idx = MipsIndex(list(range(300)), rng.normal(size=(300, 8)))
    q = rng.normal(size=(5, 8))
    rows, scores = idx.top_n_rows(q, 12)
    for k in range(5):
        single = mips.top_n(idx, q[k], 12)
        assert [idx.ids[r] for r in rows[k]] == [h.id for h in single]
        assert np.array_equal(scores[k], [h.score for h in single])


# -- approximate mode -----------------------------------------------------------------


def test_approx_exhaustive_budget_is_exact():
    rng = np.random.default_rng(1)
    idx = MipsIndex(list(range(500)), rng.normal(size=(500, 8)))
    q = rng.normal(size=8)
    assert mips.top_n_approx(idx, q, 10, probe_budget=500) == mips.top_n(idx, q, 10)


def test_approx_n_zero():
    idx = MipsIndex(list(range(50)), np.random.default_rng(0).normal(size=(50, 4)))
    assert mips.top_n_approx(idx, np.ones(4), 0) == []


def test_approx_recall_at_default_budget():
    rng = np.random.default_rng(7)
    idx = MipsIndex(list(range(1000)), rng.normal(size=(1000, 16)))
    recalls = []
    for _ in range(50):
        q = rng.normal(size=16)
        exact = {h.id for h in mips.top_n(idx, q, 10)}
        approx = mips.top_n_approx(idx, q, 10)
        assert len(approx) == 10
        assert [h.score for h in approx] == sorted((h.score for h in approx), reverse=True)
        recalls.append(len(exact & {h.id for h in approx}) / 10)
    assert np.mean(recalls) >= 0.9


def test_approx_scores_are_exact_inner_products():
    rng = np.random.default_rng(8)
    idx = MipsIndex(list(range(400)), rng.normal(size=(400, 6)))
    q = rng.normal(size=6)
    for h in mips.top_n_approx(idx, q, 5, probe_budget=50):
        assert h.score == pytest.approx(float(idx.vectors[h.id] @ q), rel=1e-12)


def test_index_save_load(tmp_path):
    rng = np.random.default_rng(0)
    idx = MipsIndex(list(range(20)), rng.normal(size=(20, 3)))
    mips.save_index(tmp_path / "i.txt", idx)
    back = mips.load_index(tmp_path / "i.txt")
    assert back.ids == idx.ids and np.array_equal(back.vectors, idx.vectors)
