import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hybridattn.featuremap import FeatureMaps
from hybridattn.numerics import make_rng
from hybridattn.routing import (LinearState, SalientCache, commit_chunk, load_snapshot,
                                reset, save_snapshot, select_chunk)


class TestSelectChunk:
    def test_lambda_zero(self):
        masks = select_chunk(np.array([1.0, 2.0, 3.0]), 0)
        assert masks.sa_indices.size == 0
        assert_array_equal(masks.la_indices, [0, 1, 2])

    def test_lambda_full(self):
        masks = select_chunk(np.array([1.0, 2.0, 3.0]), 3)
        assert_array_equal(masks.sa_indices, [0, 1, 2])
        assert masks.la_indices.size == 0

    def test_tie_to_lower_index(self):
        masks = select_chunk(np.array([3.0, 1.0, 2.0, 2.0]), 2)
        assert_array_equal(masks.sa_indices, [0, 2])
        assert_array_equal(masks.la_indices, [1, 3])
        masks.check(4)


def _chunk(rng, c, d):
    return rng.standard_normal((c, d)), rng.standard_normal((c, d))


class TestCommitChunk:
    def test_full_promotion_leaves_state_zero(self, rng):
        c, d = 4, 3
        cache, state = reset(d, 2 * d)
        k, v = _chunk(rng, c, d)
        phi = np.abs(rng.standard_normal((c, 2 * d)))
        scores = rng.standard_normal(c)
        commit_chunk(cache, state, k, v, phi, select_chunk(scores, c), scores, 0)
        assert len(cache) == c
        assert_array_equal(state.s, 0.0)
        assert state.count == 0

    def test_single_token_to_state(self, rng):
        d = 3
        cache, state = reset(d, 2 * d)
        k, v = _chunk(rng, 1, d)
        phi = np.abs(rng.standard_normal((1, 2 * d)))
        scores = np.zeros(1)
        commit_chunk(cache, state, k, v, phi, select_chunk(scores, 0), scores, 0)
        assert len(cache) == 0
        assert_allclose(state.s, np.outer(phi[0], v[0]), rtol=0)
        assert_allclose(state.z, phi[0], rtol=0)
        assert (state.z >= 0).all()

    def test_eviction_keeps_high_scores(self, rng):
        d = 2
        cache = SalientCache(d, cap=2)
        k, v = _chunk(rng, 3, d)
        cache.append(k, v, np.array([5.0, 1.0, 3.0]), np.array([0, 1, 2]))
        assert sorted(cache.scores.tolist()) == [3.0, 5.0]
        assert_array_equal(cache.origins, [0, 2])

    def test_eviction_tie_drops_oldest(self, rng):
        d = 2
        cache = SalientCache(d, cap=1)
        k, v = _chunk(rng, 3, d)
        cache.append(k, v, np.array([2.0, 2.0, 2.0]), np.array([5, 9, 11]))
        assert_array_equal(cache.origins, [11])

    def test_cap_invariant_holds_throughout(self, rng):
        d, cap = 3, 5
        cache = SalientCache(d, cap=cap)
        for base in range(0, 40, 4):
            k, v = _chunk(rng, 4, d)
            cache.append(k, v, rng.standard_normal(4), base + np.arange(4))
            assert len(cache) <= cap
        assert cache.total_promoted == 40

    def test_origins_must_increase(self, rng):
        cache = SalientCache(2)
        k, v = _chunk(rng, 2, 2)
        with pytest.raises(ValueError, match="strictly increasing"):
            cache.append(k, v, np.zeros(2), np.array([3, 3]))


class TestReset:
    def test_empty_and_zero(self):
        cache, state = reset(4, 8, cap=10)
        assert len(cache) == 0
        assert np.linalg.norm(state.s) == 0.0
        assert np.linalg.norm(state.z) == 0.0
        assert state.count == 0


class TestConservation:
    def test_counts_and_state_sum_exactness(self, rng):
        # stream chunks through commit; incremental (s, z) must match both a
        # replayed accumulation and an order-free numpy recomputation
        c, d, lam, chunks = 6, 4, 2, 7
        cache, state = reset(d, 2 * d)
        all_phi, all_v, la_rows = [], [], []
        for r in range(chunks):
            k, v = _chunk(rng, c, d)
            phi = np.abs(rng.standard_normal((c, 2 * d)))
            scores = rng.standard_normal(c)
            masks = select_chunk(scores, lam)
            commit_chunk(cache, state, k, v, phi, masks, scores, r * c)
            all_phi.append(phi)
            all_v.append(v)
            la_rows.extend((r * c + i) for i in masks.la_indices)
            assert cache.total_promoted + state.count == (r + 1) * c
        phi_all = np.concatenate(all_phi)
        v_all = np.concatenate(all_v)
        rows = np.array(la_rows)
        s_ref = np.einsum("nf,nd->fd", phi_all[rows], v_all[rows])
        z_ref = phi_all[rows].sum(axis=0)
        assert np.abs(state.s - s_ref).max() <= 1e-10
        assert np.abs(state.z - z_ref).max() <= 1e-10

    def test_uncapped_commit_is_deterministic(self, rng):
        c, d, lam = 5, 3, 2
        def run():
            r = make_rng(77)
            cache, state = reset(d, 2 * d)
            for i in range(6):
                k = r.standard_normal((c, d))
                v = r.standard_normal((c, d))
                phi = np.abs(r.standard_normal((c, 2 * d)))
                scores = r.standard_normal(c)
                commit_chunk(cache, state, k, v, phi, select_chunk(scores, lam), scores, i * c)
            return cache, state
        c1, s1 = run()
        c2, s2 = run()
        assert_array_equal(c1.keys, c2.keys)
        assert_array_equal(s1.s, s2.s)
        assert_array_equal(s1.z, s2.z)


def test_snapshot_round_trip(tmp_path, rng):
    d = 3
    caches, states = [], []
    for h in range(2):
        cache, state = reset(d, 2 * d, cap=8)
        k, v = _chunk(rng, 4, d)
        phi = np.abs(rng.standard_normal((4, 2 * d)))
        scores = rng.standard_normal(4)
        commit_chunk(cache, state, k, v, phi, select_chunk(scores, 2), scores, 0)
        caches.append(cache)
        states.append(state)
    save_snapshot(tmp_path / "snap", caches, states, meta={"tag": "test"})
    back_c, back_s, meta = load_snapshot(tmp_path / "snap")
    assert meta["tag"] == "test"
    for h in range(2):
        assert_array_equal(back_c[h].keys, caches[h].keys)
        assert_array_equal(back_c[h].origins, caches[h].origins)
        assert back_c[h].cap == caches[h].cap
        assert_array_equal(back_s[h].s, states[h].s)
        assert back_s[h].count == states[h].count
