import mpmath as mp
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_instance
from hybridattn.config import AttentionConfig
from hybridattn.engine import (DecodeSession, decode_sequence, decode_step,
                               oracle_full_softmax, oracle_linear_attention,
                               oracle_swa, output_error_curve,
                               prefill_chunk_parallel, reference_hybrid)
from hybridattn.featuremap import FeatureMaps, np_map
from hybridattn.numerics import make_rng
from hybridattn.saliency import self_saliency_scores

mp.mp.dps = 40


def mp_full_softmax(q, k, v, scale=True):
    """Arbitrary-precision double-loop causal softmax attention."""
    n, d = q.shape
    sf = 1 / mp.sqrt(d) if scale else mp.mpf(1)
    y = np.empty_like(q)
    for t in range(n):
        ws = [mp.e ** (mp.fsum(mp.mpf(q[t, i]) * mp.mpf(k[j, i]) for i in range(d)) * sf)
              for j in range(t + 1)]
        z = mp.fsum(ws)
        for i in range(d):
            y[t, i] = float(mp.fsum(ws[j] * mp.mpf(v[j, i]) for j in range(t + 1)) / z)
    return y


class TestFullSoftmaxOracle:
    def test_first_token_is_value(self, rng):
        q, k, v = (rng.standard_normal((1, 4)) for _ in range(3))
        assert_allclose(oracle_full_softmax(q, k, v), v, rtol=0)

    def test_equal_logits_average(self, rng):
        n, d = 6, 4
        q = np.zeros((n, d))
        k, v = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        out = oracle_full_softmax(q, k, v)
        for t in range(n):
            assert_allclose(out[t], v[: t + 1].mean(axis=0), rtol=1e-14)

    def test_against_arbitrary_precision(self, rng):
        n, d = 12, 4
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        assert np.abs(oracle_full_softmax(q, k, v) - mp_full_softmax(q, k, v)).max() <= 1e-10

    def test_blocking_invariance(self, rng):
        q, k, v = (rng.standard_normal((50, 8)) for _ in range(3))
        a = oracle_full_softmax(q, k, v, block=7)
        b = oracle_full_softmax(q, k, v, block=1024)
        assert np.abs(a - b).max() <= 1e-13


class TestSwaOracle:
    def test_wide_window_equals_full(self, rng):
        q, k, v = (rng.standard_normal((20, 4)) for _ in range(3))
        assert np.abs(oracle_swa(q, k, v, w=20) - oracle_full_softmax(q, k, v)).max() <= 1e-14

    def test_window_one_returns_value(self, rng):
        q, k, v = (rng.standard_normal((10, 4)) for _ in range(3))
        assert_allclose(oracle_swa(q, k, v, w=1), v, rtol=1e-12)

    def test_against_masked_loop(self, rng):
        n, d, w = 15, 4, 5
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        out = oracle_swa(q, k, v, w=w)
        for t in range(n):
            lo = max(0, t - w + 1)
            logits = k[lo:t + 1] @ q[t] / np.sqrt(d)
            e = np.exp(logits - logits.max())
            expect = (e / e.sum()) @ v[lo:t + 1]
            assert np.abs(out[t] - expect).max() <= 1e-12


class TestLinearAttentionOracle:
    def test_first_token_is_value(self, rng):
        q, k, v = (rng.standard_normal((1, 4)) for _ in range(3))
        phi = lambda x: np.abs(x) + 0.1
        y, flags = oracle_linear_attention(q, k, v, phi)
        assert_allclose(y, v, rtol=1e-12)
        assert not flags.any()

    def test_recurrent_matches_cumulative(self, rng):
        n, d = 40, 6
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        w = rng.standard_normal((d, d))
        phi = lambda x: np_map(x, w)[0]
        y1, _ = oracle_linear_attention(q, k, v, phi)
        y2, _ = oracle_linear_attention(q, k, v, phi, recurrent=True)
        assert np.abs(y1 - y2).max() <= 1e-10

    def test_one_hot_map_hard_selects(self):
        # orthogonal keys + identity feature map reproduce exact lookup
        d = 4
        k = np.eye(d)
        q = np.eye(d)
        v = np.arange(d * d, dtype=float).reshape(d, d)
        y, _ = oracle_linear_attention(q, k, v, lambda x: x)
        for t in range(d):
            assert_allclose(y[t], v[t], rtol=1e-12)

    def test_negative_feature_map_rejected(self, rng):
        q, k, v = (rng.standard_normal((5, 3)) for _ in range(3))
        with pytest.raises(ValueError, match="non-negative"):
            oracle_linear_attention(q, k, v, lambda x: x)

    def test_denominator_floor_flagged(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[0.0, 1.0]])
        v = np.array([[3.0, 3.0]])
        y, flags = oracle_linear_attention(q, k, v, lambda x: np.maximum(x, 0.0))
        assert flags[0]
        assert np.isfinite(y).all()


class TestReferenceHybrid:
    def test_single_chunk_equals_full(self):
        q, k, v, g = random_instance(3, heads=2, n=20, d=8)
        cfg = AttentionConfig(heads=2, head_dim=8, chunk_size=32, lam=8)
        out = reference_hybrid(q, k, v, g, cfg)
        full = oracle_full_softmax(q, k, v)
        assert np.abs(out.y - full).max() <= 1e-12

    def test_lambda_full_recovers_softmax(self):
        q, k, v, g = random_instance(4, heads=2, n=100, d=8)
        cfg = AttentionConfig(heads=2, head_dim=8, chunk_size=16, lam=16)
        out = reference_hybrid(q, k, v, g, cfg)
        assert np.abs(out.y - oracle_full_softmax(q, k, v)).max() <= 1e-10

    def test_lambda_zero_matches_composed_oracle(self):
        # independent reconstruction: exact exp over (prev chunk + prefix),
        # kernel sums over all tokens of chunks <= c-2, one shared denominator
        heads, n, d, c = 2, 70, 6, 16
        q, k, v, g = random_instance(5, heads=heads, n=n, d=d)
        maps = FeatureMaps.random(heads, d, seed=6)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=0)
        out = reference_hybrid(q, k, v, g, cfg, maps=maps)
        sf = 1 / np.sqrt(d)
        for h in range(heads):
            pq = np_map(q[h], maps.wq[h])[0]
            pk = np_map(k[h], maps.wk[h])[0]
            for t in range(n):
                c0 = t // c
                start = max(c0 - 1, 0) * c
                e = np.exp((k[h, start:t + 1] @ q[h, t]) * sf)
                n_sa = e @ v[h, start:t + 1]
                d_sa = e.sum()
                boundary = max(c0 - 1, 0) * c
                rows = np.arange(0, boundary)
                s = np.einsum("nf,nd->fd", pk[rows], v[h, rows]) if rows.size else 0.0
                z = pk[rows].sum(axis=0) if rows.size else np.zeros(2 * d)
                n_la = (pq[t] @ s) * g[h, t] if rows.size else 0.0
                d_la = pq[t] @ z
                expect = (n_sa + n_la) / (d_sa + d_la)
                assert np.abs(out.y[h, t] - expect).max() <= 1e-10

    def test_diagnostics_partition(self):
        q, k, v, g = random_instance(6, heads=1, n=90, d=4)
        cfg = AttentionConfig(heads=1, head_dim=4, chunk_size=16, lam=0)
        out = reference_hybrid(q, k, v, g, cfg)
        t = np.arange(90)
        assert_array_equal(out.cache_count, 0)
        assert_array_equal(out.window_count + out.la_count, t + 1)

    def test_conservation_with_promotion(self):
        q, k, v, g = random_instance(7, heads=2, n=96, d=4)
        cfg = AttentionConfig(heads=2, head_dim=4, chunk_size=16, lam=5)
        out = reference_hybrid(q, k, v, g, cfg)
        t = np.arange(96)
        assert_array_equal(out.window_count + out.cache_count + out.la_count, t + 1)


class TestDecodeSession:
    def test_stream_matches_reference_bitwise(self):
        for seed, heads, d, c, lam, cap in [(8, 2, 8, 16, 4, None), (9, 4, 16, 32, 8, 40),
                                            (10, 1, 4, 8, 0, None), (11, 3, 8, 16, 16, None)]:
            n = 8 * c
            q, k, v, g = random_instance(seed, heads=heads, n=n, d=d)
            maps = FeatureMaps.random(heads, d, seed=seed + 100)
            cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=lam, cache_cap=cap)
            ref = reference_hybrid(q, k, v, g, cfg, maps=maps)
            dec = decode_sequence(q, k, v, g, cfg, maps=maps)
            assert_array_equal(dec.y, ref.y)
            assert_array_equal(dec.d_sa, ref.d_sa)
            assert_array_equal(dec.d_la, ref.d_la)

    def test_short_stream_matches_full_softmax(self):
        q, k, v, _ = random_instance(12, heads=2, n=10, d=4)
        cfg = AttentionConfig(heads=2, head_dim=4, chunk_size=16, lam=4)
        session = DecodeSession(cfg)
        ys = np.stack([decode_step(session, q[:, t], k[:, t], v[:, t]) for t in range(10)], axis=1)
        assert np.abs(ys - oracle_full_softmax(q, k, v)).max() <= 1e-12

    def test_snapshot_restore_is_bit_identical(self, tmp_path):
        heads, d, c = 2, 6, 8
        n = 5 * c + 3
        q, k, v, g = random_instance(13, heads=heads, n=n, d=d)
        maps = FeatureMaps.random(heads, d, seed=14)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=2, cache_cap=7)
        cut = 3 * c + 1

        full = DecodeSession(cfg, maps=maps)
        expect = [full.step(q[:, t], k[:, t], v[:, t], g[:, t]) for t in range(n)]

        first = DecodeSession(cfg, maps=maps)
        for t in range(cut):
            first.step(q[:, t], k[:, t], v[:, t], g[:, t])
        first.save(tmp_path / "session")
        resumed = DecodeSession.load(tmp_path / "session", maps=maps)
        for t in range(cut, n):
            y = resumed.step(q[:, t], k[:, t], v[:, t], g[:, t])
            assert_array_equal(y, expect[t])


class TestPrefillChunkParallel:
    def test_one_chunk_equals_full(self):
        q, k, v, g = random_instance(15, heads=2, n=16, d=8)
        cfg = AttentionConfig(heads=2, head_dim=8, chunk_size=16, lam=4)
        out = prefill_chunk_parallel(q, k, v, g, cfg)
        assert np.abs(out.y - oracle_full_softmax(q, k, v)).max() <= 1e-12

    @pytest.mark.parametrize("lam_frac", [0, 0.25, 0.5, 1.0])
    def test_matches_reference(self, lam_frac):
        heads, d, c = 2, 8, 32
        n = 8 * c
        lam = int(c * lam_frac)
        q, k, v, g = random_instance(16 + lam, heads=heads, n=n, d=d)
        maps = FeatureMaps.random(heads, d, seed=17)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=lam)
        ref = reference_hybrid(q, k, v, g, cfg, maps=maps)
        par = prefill_chunk_parallel(q, k, v, g, cfg, maps=maps)
        assert np.abs(par.y - ref.y).max() <= 1e-10

    def test_ragged_tail_and_cap(self):
        heads, d, c = 2, 8, 16
        q, k, v, g = random_instance(18, heads=heads, n=117, d=d)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=4, cache_cap=9)
        ref = reference_hybrid(q, k, v, g, cfg)
        par = prefill_chunk_parallel(q, k, v, g, cfg)
        assert np.abs(par.y - ref.y).max() <= 1e-10
        assert (par.cache_count <= 9).all()

    def test_single_precision_tolerance(self):
        heads, d, c = 2, 8, 16
        q, k, v, g = random_instance(19, heads=heads, n=6 * c, d=d, dtype=np.float32)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=4, precision="f32")
        ref = reference_hybrid(q, k, v, g, cfg)
        par = prefill_chunk_parallel(q, k, v, g, cfg)
        assert ref.y.dtype == np.float32
        assert np.abs(par.y.astype(np.float64) - ref.y.astype(np.float64)).max() <= 1e-4

    def test_scores_match_saliency_module(self):
        q, k, v, _ = random_instance(20, heads=2, n=96, d=8)
        cfg = AttentionConfig(heads=2, head_dim=8, chunk_size=32, lam=4)
        out = prefill_chunk_parallel(q, k, v, None, cfg)
        rep = self_saliency_scores(q, k, w=32, epsilon=cfg.epsilon)
        assert np.abs(out.scores - rep.scores).max() <= 1e-12

    def test_denominators_positive(self):
        q, k, v, g = random_instance(21, heads=2, n=80, d=8)
        cfg = AttentionConfig(heads=2, head_dim=8, chunk_size=16, lam=2)
        out = prefill_chunk_parallel(q, k, v, g, cfg)
        assert ((out.d_sa + out.d_la) > 0).all()
        assert not out.floor_flags.any()


class TestCausality:
    def test_future_perturbation_does_not_leak(self):
        heads, d, c, n = 1, 6, 8, 40
        q, k, v, g = random_instance(22, heads=heads, n=n, d=d)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=2)
        base = prefill_chunk_parallel(q, k, v, g, cfg).y
        r = make_rng(23)
        for j in (12, 25, 33):
            k2, v2, q2 = k.copy(), v.copy(), q.copy()
            q2[:, j] += r.standard_normal(d)
            k2[:, j] += r.standard_normal(d)
            v2[:, j] += r.standard_normal(d)
            pert = prefill_chunk_parallel(q2, k2, v2, g, cfg).y
            assert_array_equal(pert[:, :j], base[:, :j])


class TestErrorCurve:
    def test_endpoints(self):
        heads, d, c = 2, 8, 16
        q, k, v, g = random_instance(24, heads=heads, n=6 * c, d=d)
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=0)
        curve = dict(output_error_curve(q, k, v, g, cfg, [0, c // 2, c]))
        assert curve[c] <= 1e-8
        assert curve[0] >= curve[c]

    def test_mean_curve_nonincreasing(self):
        heads, d, c = 1, 8, 16
        cfg = AttentionConfig(heads=heads, head_dim=d, chunk_size=c, lam=0)
        grid = [0, c // 4, c // 2, c]
        errs = np.zeros(len(grid))
        seeds = 6
        for s in range(seeds):
            q, k, v, g = random_instance(100 + s, heads=heads, n=5 * c, d=d)
            errs += np.array([e for _, e in output_error_curve(q, k, v, g, cfg, grid)])
        errs /= seeds
        assert (np.diff(errs) <= 1e-12).all()
