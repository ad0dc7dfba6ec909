import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from ccpt.diffcore import ContractError, ParameterError, ShapeError
from ccpt.encoders import init_encoders
from ccpt.rehearsal import (
    BufferEntry,
    ClusterResult,
    RehearsalBuffer,
    build_mof_exemplars,
    build_stage_exemplars,
    joint_embeddings,
    kmeans,
    kmeans_pp_init,
    lloyd,
    mof_select,
    rebalance_buffer,
    replay_count,
    reservoir_offer,
    reservoir_update,
    sample_mixed_batch,
    select_representatives,
)
from ccpt.synthstream import ModalitySpec, PairBatch, build_modality, sample_pairs
from oracles import brute_representatives, greedy_herding, lloyd_fixed_points, naive_lloyd


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ------------------------------------------------------------ joint embedding

def test_joint_embedding_boundaries():
    rng = np.random.default_rng(0)
    i, t = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    j = joint_embeddings(i, t, np.array([1.0, 0.0, 0.5]))
    np.testing.assert_array_equal(j[0], i[0])
    np.testing.assert_array_equal(j[1], t[1])
    np.testing.assert_allclose(j[2], (i[2] + t[2]) / 2, atol=1e-15)


def test_joint_embedding_clamps_and_accepts_full_matrix():
    rng = np.random.default_rng(1)
    i, t = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3)
    sim = np.array([[1.7, 0.2], [0.3, -0.4]])
    j = joint_embeddings(i, t, sim)
    np.testing.assert_array_equal(j[0], i[0])
    np.testing.assert_array_equal(j[1], t[1])
    with pytest.raises(ShapeError):
        joint_embeddings(i, t[:1], sim)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**31))
def test_joint_embedding_lies_on_segment(n, d, seed):
    rng = np.random.default_rng(seed)
    i, t = unit_rows(rng, n, d), unit_rows(rng, n, d)
    s = rng.uniform(-0.5, 1.5, n)
    j = joint_embeddings(i, t, s)
    w = np.clip(s, 0, 1)
    for r in range(n):
        seg = i[r] - t[r]
        if np.allclose(seg, 0):
            continue
        lam = np.dot(j[r] - t[r], seg) / np.dot(seg, seg)
        assert -1e-12 <= lam <= 1 + 1e-12
        np.testing.assert_allclose(t[r] + lam * seg, j[r], atol=1e-12)
        assert lam == pytest.approx(w[r], abs=1e-9)


# -------------------------------------------------------------------- kmeans

def test_kmeans_n_equals_k():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 2))
    res = kmeans(x, 5, seed=0)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, x))


def test_kmeans_two_pairs():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    res = kmeans(x, 2, seed=3)
    got = sorted(map(tuple, res.centroids))
    assert got == [(0.0, 0.5), (10.0, 0.5)]
    assert res.inertia == pytest.approx(1.0)


def test_kmeans_parameter_errors():
    x = np.zeros((3, 2))
    for k in (0, 4):
        with pytest.raises(ParameterError):
            kmeans(x, k, seed=0)


def test_kmeans_deterministic_per_seed():
    x = np.random.default_rng(4).standard_normal((40, 3))
    a, b = kmeans(x, 4, seed=9), kmeans(x, 4, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_kmeans_invariants_and_monotone_inertia():
    rng = np.random.default_rng(5)
    for s in range(20):
        x = rng.standard_normal((30, 2))
        res = kmeans(x, 3, seed=s)
        d = ((x[:, None] - res.centroids[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(res.assignments, np.argmin(d, axis=1))
        for c in range(3):
            members = x[res.assignments == c]
            if len(members):
                np.testing.assert_allclose(res.centroids[c], members.mean(0), atol=1e-12)
        h = res.inertia_history
        assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))
        assert res.inertia <= h[0] + 1e-12


def test_kmeans_matches_exhaustive_fixed_points_and_reference_lloyd():
    """Small instances: the result is an enumerated Lloyd fixed point and
    coincides with a plain-Python Lloyd run from the same seeding."""
    rng = np.random.default_rng(6)
    for inst in range(100):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        x = np.round(rng.standard_normal((n, 2)), 3)
        res = kmeans(x, k, seed=inst)
        init = kmeans_pp_init(x, k, np.random.default_rng(inst))
        ref_labels, ref_cents = naive_lloyd(x.tolist(), x[init].tolist())
        np.testing.assert_array_equal(res.assignments, ref_labels)
        np.testing.assert_allclose(res.centroids, ref_cents, atol=1e-12)
        fixed = {lab: inertia for lab, inertia in lloyd_fixed_points(x.tolist(), k)}
        assert tuple(int(v) for v in res.assignments) in fixed
        assert res.inertia == pytest.approx(fixed[tuple(int(v) for v in res.assignments)], abs=1e-9)
        assert res.inertia >= min(fixed.values()) - 1e-9


def test_empty_cluster_moves_to_farthest_point():
    x = np.array([[0.0], [1.0], [10.0]])
    res = lloyd(x, np.array([[0.5], [100.0]]), max_iters=10)
    assert sorted(res.centroids.ravel().tolist()) == [0.5, 10.0]


# ------------------------------------------------------------ representatives

def test_select_all_when_k_equals_n():
    x = np.random.default_rng(7).standard_normal((6, 2))
    res = kmeans(x, 6, seed=0)
    assert sorted(i for i, _ in select_representatives(res, x, 1)) == list(range(6))


def test_collinear_middle_point():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    res = kmeans(x, 1, seed=0)
    assert select_representatives(res, x, 1) == [(1, 0.0)]


def test_small_cluster_gives_all_members_and_rejects_zero():
    x = np.array([[0.0], [0.1], [5.0]])
    res = kmeans(x, 2, seed=1)
    assert len(select_representatives(res, x, 5)) == 3
    with pytest.raises(ParameterError):
        select_representatives(res, x, 0)


def test_selection_matches_brute_force():
    rng = np.random.default_rng(8)
    for s in range(30):
        x = rng.standard_normal((20, 3))
        res = kmeans(x, 4, seed=s)
        got = [i for i, _ in select_representatives(res, x, 2)]
        want = brute_representatives(x.tolist(), res.assignments.tolist(), res.centroids.tolist(), 2)
        assert got == want


def test_selection_on_tiny_instances_matches_brute_force():
    rng = np.random.default_rng(9)
    for s in range(100):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        x = rng.standard_normal((n, 2))
        res = kmeans(x, k, seed=s)
        per = int(rng.integers(1, 4))
        got = [i for i, _ in select_representatives(res, x, per)]
        assert got == brute_representatives(x.tolist(), res.assignments.tolist(),
                                            res.centroids.tolist(), per)


def test_selection_invariant_to_point_order():
    rng = np.random.default_rng(15)
    for s in range(20):
        x = rng.standard_normal((25, 3))
        res = kmeans(x, 3, seed=s)
        perm = rng.permutation(25)
        moved = ClusterResult(res.centroids, res.assignments[perm], res.inertia, res.n_iter)
        got = {int(perm[i]) for i, _ in select_representatives(moved, x[perm], 2)}
        assert got == {i for i, _ in select_representatives(res, x, 2)}


# ------------------------------------------------------------------ exemplars

def _pool(n, n_classes=4, seed=0):
    gen = build_modality(ModalitySpec(1, n_classes, generator_seed=7))
    return sample_pairs(gen, n, np.random.default_rng(seed))


def _index_in(pool, entry):
    return next(j for j in range(len(pool)) if np.array_equal(pool.images[j], entry.image))


def test_pool_returned_verbatim_when_k_equals_q():
    pool = _pool(6)
    ex = build_stage_exemplars(pool, init_encoders(32, 24, 16, 8, seed=0), 6, 6, seed=1)
    assert sorted(_index_in(pool, e) for e in ex) == list(range(6))


def test_exemplars_deterministic_and_sized():
    pool = _pool(64)
    p = init_encoders(32, 24, 16, 8, seed=0)
    a = build_stage_exemplars(pool, p, 10, 4, seed=2)
    b = build_stage_exemplars(pool, p, 10, 4, seed=2)
    assert len(a) == 10
    assert [e.image.tobytes() for e in a] == [e.image.tobytes() for e in b]
    assert [e.rank for e in a] == sorted(e.rank for e in a)


def test_exemplars_reject_empty_pool():
    empty = PairBatch(np.zeros((0, 32)), np.zeros((0, 24)), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ContractError):
        build_stage_exemplars(empty, init_encoders(32, 24, 16, 8, seed=0), 4, 2, seed=0)


def test_exemplars_cover_latent_classes():
    covered = 0
    for s in range(100):
        pool = _pool(64, seed=s)
        ex = build_stage_exemplars(pool, init_encoders(32, 24, 64, 16, seed=s), 8, 4, seed=s)
        covered += len({pool.labels[_index_in(pool, e)] for e in ex}) >= 3
    assert covered >= 90


def test_mof_exemplars_rank_is_pick_order():
    pool = _pool(30)
    ex = build_mof_exemplars(pool, init_encoders(32, 24, 16, 8, seed=0), 5)
    assert [e.rank for e in ex] == [0.0, 1.0, 2.0, 3.0, 4.0]


# ----------------------------------------------------------------- herding

def test_herding_examples():
    x = np.array([[0.0, 0.0], [3.0, 0.0], [1.0, 0.1], [-2.0, 5.0]])
    mu = x.mean(0)
    assert mof_select(x, 1) == [int(np.argmin(np.linalg.norm(x - mu, axis=1)))]
    assert mof_select(np.ones((5, 3)), 3) == [0, 1, 2]
    with pytest.raises(ParameterError):
        mof_select(x, 5)


def test_herding_matches_greedy_oracle():
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        q = int(rng.integers(0, min(3, n) + 1))
        x = rng.standard_normal((n, 3))
        assert mof_select(x, q) == greedy_herding(x.tolist(), q)


# ------------------------------------------------------------------- buffer

def entry(mod, rank, tag=0.0):
    return BufferEntry(np.array([tag]), np.array([tag]), mod, rank)


def test_rebalance_examples():
    buf = RehearsalBuffer(12)
    rebalance_buffer(buf, [entry(1, r) for r in range(12)], 1)
    assert buf.counts() == {1: 12}
    rebalance_buffer(buf, [entry(2, r) for r in range(6)], 2)
    assert buf.counts() == {1: 6, 2: 6}
    assert sorted(e.rank for e in buf.entries if e.modality == 1) == list(range(6))
    rebalance_buffer(buf, [entry(3, r) for r in range(4)], 3)
    assert buf.counts() == {1: 4, 2: 4, 3: 4}

    buf = RehearsalBuffer(10)
    rebalance_buffer(buf, [entry(1, r) for r in range(10)], 1)
    rebalance_buffer(buf, [entry(2, r) for r in range(5)], 2)
    assert buf.counts() == {1: 5, 2: 5}
    rebalance_buffer(buf, [entry(3, r) for r in range(3)], 3)
    assert buf.counts() == {1: 4, 2: 3, 3: 3}


def test_rebalance_evicts_largest_rank():
    buf = RehearsalBuffer(2)
    rebalance_buffer(buf, [entry(1, r) for r in (0.5, 0.1, 0.9)], 1)
    assert sorted(e.rank for e in buf.entries) == [0.1, 0.5]


def test_rebalance_laws_over_random_sequences():
    rng = np.random.default_rng(11)
    ops = 0
    while ops < 10_000:
        cap = int(rng.integers(1, 60))
        buf = RehearsalBuffer(cap)
        for _ in range(int(rng.integers(1, 40))):
            mod = int(rng.integers(1, 11))
            mods = buf.modalities + ([] if mod in buf.modalities else [mod])
            need = buf.quotas(mods)[mod]
            extra = int(rng.integers(0, 5))
            rebalance_buffer(buf, [entry(mod, float(r)) for r in rng.random(need + extra)], mod)
            ops += 1
            counts = list(buf.counts().values())
            assert len(buf) <= cap
            assert max(counts) - min(counts) <= 1
            assert sum(counts) == len(buf)


def test_capacity_never_exceeded_under_mixed_operations():
    rng = np.random.default_rng(12)
    buf = RehearsalBuffer(17)
    seen = 0
    for _ in range(10_000):
        if rng.random() < 0.1:
            mod = int(rng.integers(1, 5))
            rebalance_buffer(buf, [entry(mod, float(r)) for r in rng.random(int(rng.integers(0, 30)))], mod)
        else:
            seen += 1
            reservoir_update(buf, entry(int(rng.integers(1, 5)), 0.0), seen, rng)
        assert len(buf) <= 17


def test_reservoir_fills_first():
    buf = RehearsalBuffer(5)
    rng = np.random.default_rng(0)
    for n in range(1, 6):
        reservoir_update(buf, entry(1, 0.0, float(n)), n, rng)
    assert [e.image[0] for e in buf.entries] == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_reservoir_inclusion_is_uniform():
    cap, stream, trials = 50, 1000, 10_000
    items = [entry(1, 0.0, float(i)) for i in range(stream)]
    counts = np.zeros(stream)
    rng = np.random.default_rng(13)
    for _ in range(trials):
        buf = RehearsalBuffer(cap)
        reservoir_offer(buf, items, 0, rng)
        for e in buf.entries:
            counts[int(e.image[0])] += 1
    assert counts.sum() == cap * trials
    assert chisquare(counts).pvalue > 0.01


# -------------------------------------------------------------- mixed batch

def _current(n):
    return PairBatch(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n, int), np.full(n, 9))


def test_mixed_batch_counts():
    buf = RehearsalBuffer(4, [entry(1, 0.0, 1.0), entry(2, 0.0, 2.0)], [1, 2])
    rng = np.random.default_rng(0)
    b = sample_mixed_batch(buf, _current, 24, 0.0, rng)
    assert not b.replayed.any() and set(b.modality) == {9}
    b = sample_mixed_batch(buf, _current, 24, 0.5, rng)
    assert b.replayed.sum() == 12 and (b.modality == 9).sum() == 12
    assert np.array_equal(b.modality != 9, b.replayed)
    assert replay_count(24, 0.25) == 6
    with pytest.raises(ParameterError):
        sample_mixed_batch(buf, _current, 24, 1.0, rng)


def test_mixed_batch_falls_back_on_empty_buffer():
    b = sample_mixed_batch(RehearsalBuffer(4), _current, 10, 0.5, np.random.default_rng(0))
    assert not b.replayed.any() and len(b.modality) == 10


def test_replayed_modalities_follow_buffer_composition():
    buf = RehearsalBuffer(10, [entry(1, 0.0)] * 5 + [entry(2, 0.0)] * 3 + [entry(3, 0.0)] * 2, [1, 2, 3])
    rng = np.random.default_rng(14)
    mods = []
    while len(mods) < 10_000:
        b = sample_mixed_batch(buf, _current, 24, 0.5, rng)
        mods.extend(b.modality[b.replayed].tolist())
    counts = np.bincount(mods[:10_000], minlength=4)[1:]
    assert chisquare(counts, np.array([0.5, 0.3, 0.2]) * 10_000).pvalue > 0.01
