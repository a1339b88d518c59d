"""Hybrid softmax/linear attention in three interchangeable forms, plus oracles.

Forms:
  * reference_hybrid  — naive per-token evaluation; routing state rebuilt from
    scratch at every chunk boundary;
  * DecodeSession / decode_step — streaming recurrent form with incremental
    cache/state, bit-identical to the reference per precision;
  * prefill_chunk_parallel — vectorized chunk-wise form (scores, selection and
    linear-branch cumsums batched per chunk).

Shared conventions: positions are 0-based; a token at position t in chunk c
(t = c*C + b) scores itself over the trailing window {t-C+1..t}, attends with
exact softmax over the full previous chunk plus the in-chunk prefix plus the
salient cache, and reads the linear state accumulated through chunk c-2.
Chunk c is routed (top-lambda promoted, rest folded into the state) when the
first token of chunk c+2 arrives. The two attention branches share one
denominator; exp terms are computed unshifted so the branches stay on a
common scale (inputs are assumed desk-scale, |logit| well below overflow).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .config import AttentionConfig
from .featuremap import FeatureMaps
from .numerics import DENOM_FLOOR, top_k_indices
from .routing import LinearState, RoutingMasks, SalientCache, commit_chunk, reset, select_chunk


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def _heads3(x: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError("expected (N, d) or (H, N, d)")


def _scale_factor(d: int, scale: bool) -> float:
    return 1.0 / math.sqrt(d) if scale else 1.0


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_full_softmax(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        scale: bool = True, block: int = 1024) -> np.ndarray:
    """Causal softmax attention with row-max stabilization, row-blocked."""
    q = np.asarray(q)
    qh, single = _heads3(q, q.dtype)
    kh, _ = _heads3(k, q.dtype)
    vh, _ = _heads3(v, q.dtype)
    heads, n, d = qh.shape
    sf = _scale_factor(d, scale)
    y = np.empty_like(qh)
    for h in range(heads):
        for i0 in range(0, n, block):
            i1 = min(i0 + block, n)
            logits = qh[h, i0:i1] @ kh[h, :i1].T * sf
            mask = np.arange(i1)[None, :] <= np.arange(i0, i1)[:, None]
            logits = np.where(mask, logits, -np.inf)
            logits -= logits.max(axis=-1, keepdims=True)
            e = np.where(mask, np.exp(logits), 0.0)
            y[h, i0:i1] = (e / e.sum(axis=-1, keepdims=True)) @ vh[h, :i1]
    return y[0] if single else y


def oracle_swa(q: np.ndarray, k: np.ndarray, v: np.ndarray, w: int,
               scale: bool = True, block: int = 1024) -> np.ndarray:
    """Softmax attention restricted to the trailing window {t-w+1..t}."""
    q = np.asarray(q)
    qh, single = _heads3(q, q.dtype)
    kh, _ = _heads3(k, q.dtype)
    vh, _ = _heads3(v, q.dtype)
    heads, n, d = qh.shape
    sf = _scale_factor(d, scale)
    y = np.empty_like(qh)
    for h in range(heads):
        for i0 in range(0, n, block):
            i1 = min(i0 + block, n)
            rows = np.arange(i0, i1)[:, None]
            cols = np.arange(i1)[None, :]
            mask = (cols <= rows) & (cols >= rows - w + 1)
            logits = qh[h, i0:i1] @ kh[h, :i1].T * sf
            logits = np.where(mask, logits, -np.inf)
            logits -= logits.max(axis=-1, keepdims=True)
            e = np.where(mask, np.exp(logits), 0.0)
            y[h, i0:i1] = (e / e.sum(axis=-1, keepdims=True)) @ vh[h, :i1]
    return y[0] if single else y


def oracle_linear_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, phi,
                            recurrent: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Pure kernelized attention y_t = phi(q_t) S_t / (phi(q_t) z_t), single head.

    `phi` maps (N, d) -> (N, f) with non-negative entries. Returns (y, flags)
    where flags marks tokens whose denominator hit the 1e-12 floor.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    pq, pk = phi(q), phi(k)
    if (pk < 0).any() or (pq < 0).any():
        raise ValueError("feature map must be non-negative")
    n, d = v.shape
    if recurrent:
        s = np.zeros((pq.shape[1], d), dtype=q.dtype)
        z = np.zeros(pq.shape[1], dtype=q.dtype)
        num = np.empty((n, d), dtype=q.dtype)
        den = np.empty(n, dtype=q.dtype)
        for t in range(n):
            s += np.outer(pk[t], v[t])
            z += pk[t]
            num[t] = pq[t] @ s
            den[t] = pq[t] @ z
    else:
        s_cum = np.cumsum(np.einsum("nf,nd->nfd", pk, v), axis=0)
        z_cum = np.cumsum(pk, axis=0)
        num = np.einsum("nf,nfd->nd", pq, s_cum)
        den = np.einsum("nf,nf->n", pq, z_cum)
    flags = den < DENOM_FLOOR
    den = np.where(flags, den + DENOM_FLOOR, den)
    return num / den[:, None], flags


# ---------------------------------------------------------------------------
# shared per-token math (recurrent and naive forms call exactly these)
# ---------------------------------------------------------------------------

def _token_score(q_t: np.ndarray, keys: np.ndarray, sf: float, eps: float) -> np.ndarray:
    """Self-saliency score of one token over its trailing window.

    `keys` is (H, m, d) in ascending position order with the self key last.
    """
    keys = np.ascontiguousarray(keys)
    q_t = np.ascontiguousarray(q_t)
    logits = (keys @ q_t[:, :, None])[:, :, 0]
    if sf != 1.0:
        logits = logits * sf
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    a_diag = e / e.sum(axis=-1, keepdims=True)
    a_nodiag = np.zeros_like(a_diag)
    if logits.shape[1] > 1:
        sub = logits[:, :-1]
        e2 = np.exp(sub - sub.max(axis=-1, keepdims=True))
        a_nodiag[:, :-1] = e2 / e2.sum(axis=-1, keepdims=True)
    return (a_diag * np.log((a_diag + eps) / (a_nodiag + eps))).sum(axis=-1)


def _token_output(q_t, win_k, win_v, cache_k, cache_v, s, z, phi_q, g_t, sf):
    """One hybrid output: exact exp over cache + window, kernel term from (s, z).

    Cache terms are accumulated before window terms; both forms follow this
    order so their sums agree bit for bit.
    """
    q_t = np.ascontiguousarray(q_t)
    win_k = np.ascontiguousarray(win_k)
    win_v = np.ascontiguousarray(win_v)
    heads, d = q_t.shape

    if cache_k.shape[1]:
        ec = np.exp((cache_k @ q_t[:, :, None])[:, :, 0] * sf)
        n_sa = (ec[:, None, :] @ cache_v)[:, 0, :]
        d_sa = ec.sum(axis=-1)
    else:
        n_sa = np.zeros((heads, d), dtype=q_t.dtype)
        d_sa = np.zeros(heads, dtype=q_t.dtype)
    ew = np.exp((win_k @ q_t[:, :, None])[:, :, 0] * sf)
    n_sa = n_sa + (ew[:, None, :] @ win_v)[:, 0, :]
    d_sa = d_sa + ew.sum(axis=-1)

    n_la = (phi_q[:, None, :] @ s)[:, 0, :] * g_t
    d_la = np.einsum("hf,hf->h", phi_q, z)

    den = d_sa + d_la
    flags = den < DENOM_FLOOR
    if flags.any():
        den = np.where(flags, den + DENOM_FLOOR, den)
    y = (n_sa + n_la) / den[:, None]
    return y, d_sa, d_la, flags


def _commit_chunk_multihead(caches, states, maps, chunk_k, chunk_v, chunk_scores, lam, origin_base):
    """Route one chunk for every head through the shared routing-state ops."""
    heads, c, _ = chunk_k.shape
    phi_rows = np.stack([maps.phi_k_rows(np.ascontiguousarray(chunk_k[:, i])) for i in range(c)])  # (C, H, 2d)
    for h in range(heads):
        masks = select_chunk(chunk_scores[h], lam)
        commit_chunk(caches[h], states[h], chunk_k[h], chunk_v[h],
                     phi_rows[:, h], masks, chunk_scores[h], origin_base)


def _stack_caches(caches):
    sizes = {len(c) for c in caches}
    if len(sizes) != 1:
        raise AssertionError("per-head cache sizes diverged")
    return (np.stack([c.keys for c in caches]),
            np.stack([c.values for c in caches]))


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

@dataclass
class HybridOutput:
    """Hybrid attention outputs plus per-token branch diagnostics."""

    y: np.ndarray             # (H, N, d)
    d_sa: np.ndarray          # (H, N) exact-branch denominator
    d_la: np.ndarray          # (H, N) kernel-branch denominator
    window_count: np.ndarray  # (N,) exact keys from the live window
    cache_count: np.ndarray   # (N,) salient-cache entries visible at the query
    la_count: np.ndarray      # (N,) tokens folded into (s, z) at the query
    floor_flags: np.ndarray   # (H, N) denominator hit the floor
    n_sa: np.ndarray | None = None    # (H, N, d) exact-branch numerator (chunk form only)
    scores: np.ndarray | None = None  # (H, N) routing scores (chunk form only)
    la_mask: np.ndarray | None = None # (H, N) token goes to the linear branch when routed


# ---------------------------------------------------------------------------
# recurrent decode form
# ---------------------------------------------------------------------------

class DecodeSession:
    """Streaming one-token-at-a-time evaluation with incremental routing state."""

    def __init__(self, config: AttentionConfig, maps: FeatureMaps | None = None):
        self.config = config
        self.dtype = config.dtype
        heads, d, c = config.heads, config.head_dim, config.chunk_size
        self.maps = maps if maps is not None else FeatureMaps.identity(heads, d, dtype=self.dtype)
        if self.maps.heads != heads or self.maps.dim != d:
            raise ValueError("feature maps do not match config dims")
        self._sf = _scale_factor(d, config.scale)
        feat = 2 * d
        pairs = [reset(d, feat, cap=config.cache_cap, dtype=self.dtype) for _ in range(heads)]
        self.caches = [p[0] for p in pairs]
        self.states = [p[1] for p in pairs]
        self._win_k = np.zeros((heads, 2 * c, d), dtype=self.dtype)
        self._win_v = np.zeros((heads, 2 * c, d), dtype=self.dtype)
        self._win_len = 0
        self._scores: dict[int, list[np.ndarray]] = {}
        self._cache_k, self._cache_v = _stack_caches(self.caches)
        self._s = np.stack([st.s for st in self.states])
        self._z = np.stack([st.z for st in self.states])
        self.t = 0
        self.diag = {"d_sa": [], "d_la": [], "window_count": [], "cache_count": [],
                     "la_count": [], "floor_flags": []}

    # -- streaming API ------------------------------------------------------

    def step(self, q_t, k_t, v_t, g_t=None) -> np.ndarray:
        cfg = self.config
        heads, d, c = cfg.heads, cfg.head_dim, cfg.chunk_size
        q_t = np.ascontiguousarray(np.asarray(q_t, dtype=self.dtype)).reshape(heads, d)
        k_t = np.ascontiguousarray(np.asarray(k_t, dtype=self.dtype)).reshape(heads, d)
        v_t = np.ascontiguousarray(np.asarray(v_t, dtype=self.dtype)).reshape(heads, d)
        if g_t is None:
            g_t = np.ones((heads, d), dtype=self.dtype)
        else:
            g_t = np.ascontiguousarray(np.asarray(g_t, dtype=self.dtype)).reshape(heads, d)

        pos = self.t
        c0, b0 = divmod(pos, c)
        if b0 == 0 and c0 >= 2:
            self._route_chunk(c0 - 2)

        m = min(pos + 1, c)
        if m > 1:
            prev = self._win_k[:, self._win_len - (m - 1): self._win_len]
            score_keys = np.concatenate([prev, k_t[:, None, :]], axis=1)
        else:
            score_keys = k_t[:, None, :]
        self._scores.setdefault(c0, []).append(_token_score(q_t, score_keys, self._sf, cfg.epsilon))

        self._win_k[:, self._win_len] = k_t
        self._win_v[:, self._win_len] = v_t
        self._win_len += 1

        phi_q = self.maps.phi_q_rows(q_t)
        y, d_sa, d_la, flags = _token_output(
            q_t, self._win_k[:, :self._win_len], self._win_v[:, :self._win_len],
            self._cache_k, self._cache_v, self._s, self._z, phi_q, g_t, self._sf)

        self.diag["d_sa"].append(d_sa)
        self.diag["d_la"].append(d_la)
        self.diag["window_count"].append(self._win_len)
        self.diag["cache_count"].append(len(self.caches[0]))
        self.diag["la_count"].append(self.states[0].count)
        self.diag["floor_flags"].append(flags)
        self.t += 1
        return y

    def _route_chunk(self, r: int) -> None:
        c = self.config.chunk_size
        chunk_k = self._win_k[:, :c].copy()
        chunk_v = self._win_v[:, :c].copy()
        scores = np.stack(self._scores.pop(r), axis=1)  # (H, C)
        _commit_chunk_multihead(self.caches, self.states, self.maps,
                                chunk_k, chunk_v, scores, self.config.lam, origin_base=r * c)
        self._win_k[:, :c] = self._win_k[:, c:2 * c]
        self._win_v[:, :c] = self._win_v[:, c:2 * c]
        self._win_len -= c
        self._cache_k, self._cache_v = _stack_caches(self.caches)
        self._s = np.stack([st.s for st in self.states])
        self._z = np.stack([st.z for st in self.states])

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        tensors = {"win_k": self._win_k, "win_v": self._win_v}
        score_meta = {}
        for chunk, rows in self._scores.items():
            tensors[f"scores_{chunk}"] = np.stack(rows, axis=1)
            score_meta[str(chunk)] = len(rows)
        for h, (cache, state) in enumerate(zip(self.caches, self.states)):
            for name, arr in {**cache.snapshot(), **state.snapshot()}.items():
                tensors[f"h{h}_{name}"] = arr
        meta = {
            "t": self.t, "win_len": self._win_len, "score_chunks": score_meta,
            "counts": [st.count for st in self.states],
            "total_promoted": [c.total_promoted for c in self.caches],
            "config": self.config.to_json(),
        }
        tensorio.save_group(path, tensors, meta=meta)

    @classmethod
    def load(cls, path: str | Path, maps: FeatureMaps | None = None) -> "DecodeSession":
        tensors, meta = tensorio.load_group(path)
        config = AttentionConfig.from_json(meta["config"])
        session = cls(config, maps=maps)
        dtype = config.dtype
        session.t = meta["t"]
        session._win_len = meta["win_len"]
        session._win_k = tensors["win_k"].astype(dtype)
        session._win_v = tensors["win_v"].astype(dtype)
        for chunk, count in meta["score_chunks"].items():
            block = tensors[f"scores_{chunk}"].astype(dtype)
            session._scores[int(chunk)] = [block[:, i] for i in range(count)]
        for h in range(config.heads):
            sub = {k[len(f"h{h}_"):]: v.astype(dtype) for k, v in tensors.items() if k.startswith(f"h{h}_")}
            session.caches[h].restore(sub, meta["total_promoted"][h])
            session.states[h].restore(sub, meta["counts"][h])
        session._cache_k, session._cache_v = _stack_caches(session.caches)
        session._s = np.stack([st.s for st in session.states])
        session._z = np.stack([st.z for st in session.states])
        return session


def decode_step(session: DecodeSession, q_t, k_t, v_t, g_t=None) -> np.ndarray:
    """Feed one token (in order) through the streaming form."""
    return session.step(q_t, k_t, v_t, g_t)


def decode_sequence(q, k, v, g=None, config: AttentionConfig | None = None,
                    maps: FeatureMaps | None = None) -> HybridOutput:
    """Run a whole sequence through DecodeSession and collect a HybridOutput."""
    config = config or AttentionConfig()
    qh, _ = _heads3(q, config.dtype)
    kh, _ = _heads3(k, config.dtype)
    vh, _ = _heads3(v, config.dtype)
    heads, n, d = qh.shape
    gh = np.ones_like(qh) if g is None else _heads3(g, config.dtype)[0]
    session = DecodeSession(config, maps=maps)
    y = np.empty_like(qh)
    for t in range(n):
        y[:, t] = session.step(qh[:, t], kh[:, t], vh[:, t], gh[:, t])
    dg = session.diag
    return HybridOutput(
        y=y,
        d_sa=np.stack(dg["d_sa"], axis=1), d_la=np.stack(dg["d_la"], axis=1),
        window_count=np.array(dg["window_count"]), cache_count=np.array(dg["cache_count"]),
        la_count=np.array(dg["la_count"]), floor_flags=np.stack(dg["floor_flags"], axis=1))


# ---------------------------------------------------------------------------
# naive per-token reference form
# ---------------------------------------------------------------------------

def reference_hybrid(q, k, v, g=None, config: AttentionConfig | None = None,
                     maps: FeatureMaps | None = None) -> HybridOutput:
    """Token-by-token evaluation with no incremental state.

    Scores come from the same per-token formula as the streaming form; the
    salient cache and (s, z) are rebuilt from scratch at every chunk boundary
    by replaying all routing decisions, so agreement with DecodeSession is a
    real check of the incremental bookkeeping.
    """
    config = config or AttentionConfig()
    dtype = config.dtype
    qh, _ = _heads3(q, dtype)
    kh, _ = _heads3(k, dtype)
    vh, _ = _heads3(v, dtype)
    heads, n, d = qh.shape
    if heads != config.heads or d != config.head_dim:
        raise ValueError("input dims do not match config")
    gh = np.ones_like(qh) if g is None else _heads3(g, dtype)[0]
    maps = maps if maps is not None else FeatureMaps.identity(heads, d, dtype=dtype)
    c, lam, eps = config.chunk_size, config.lam, config.epsilon
    sf = _scale_factor(d, config.scale)

    scores = np.empty((heads, n), dtype=dtype)
    for t in range(n):
        m = min(t + 1, c)
        scores[:, t] = _token_score(qh[:, t], kh[:, t - m + 1:t + 1], sf, eps)

    feat = 2 * d
    cache_k = np.empty((heads, 0, d), dtype=dtype)
    cache_v = np.empty((heads, 0, d), dtype=dtype)
    s = np.zeros((heads, feat, d), dtype=dtype)
    z = np.zeros((heads, feat), dtype=dtype)
    cache_len = 0
    la_count = 0

    y = np.empty_like(qh)
    out_d_sa = np.empty((heads, n), dtype=dtype)
    out_d_la = np.empty((heads, n), dtype=dtype)
    win_counts = np.empty(n, dtype=np.int64)
    cache_counts = np.empty(n, dtype=np.int64)
    la_counts = np.empty(n, dtype=np.int64)
    floor = np.zeros((heads, n), dtype=bool)

    for t in range(n):
        c0, b0 = divmod(t, c)
        if b0 == 0 and c0 >= 2:
            pairs = [reset(d, feat, cap=config.cache_cap, dtype=dtype) for _ in range(heads)]
            caches = [p[0] for p in pairs]
            states = [p[1] for p in pairs]
            for r in range(c0 - 1):
                _commit_chunk_multihead(caches, states, maps,
                                        kh[:, r * c:(r + 1) * c], vh[:, r * c:(r + 1) * c],
                                        scores[:, r * c:(r + 1) * c], lam, origin_base=r * c)
            cache_k, cache_v = _stack_caches(caches)
            s = np.stack([st.s for st in states])
            z = np.stack([st.z for st in states])
            cache_len = len(caches[0])
            la_count = states[0].count
        start = max(c0 - 1, 0) * c
        phi_q = maps.phi_q_rows(np.ascontiguousarray(qh[:, t]))
        y[:, t], out_d_sa[:, t], out_d_la[:, t], floor[:, t] = _token_output(
            qh[:, t], kh[:, start:t + 1], vh[:, start:t + 1],
            cache_k, cache_v, s, z, phi_q, gh[:, t], sf)
        win_counts[t] = t + 1 - start
        cache_counts[t] = cache_len
        la_counts[t] = la_count

    return HybridOutput(y=y, d_sa=out_d_sa, d_la=out_d_la, window_count=win_counts,
                        cache_count=cache_counts, la_count=la_counts, floor_flags=floor)


# ---------------------------------------------------------------------------
# chunk-wise parallel prefill form
# ---------------------------------------------------------------------------

def _rows_softmax(logits: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Masked row softmax over the last axis; empty-support rows come back zero."""
    neg = np.where(support, logits, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    safe_mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(support, np.exp(neg - safe_mx), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    return np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)


def prefill_chunk_parallel(q, k, v, g=None, config: AttentionConfig | None = None,
                           maps: FeatureMaps | None = None) -> HybridOutput:
    """Vectorized chunk-wise evaluation; sequences are padded to a chunk multiple.

    Padding tokens are excluded from every softmax support, pinned to -inf
    score so they are never promoted, and contribute zero to the cumsums;
    their output rows are dropped before returning.
    """
    config = config or AttentionConfig()
    dtype = config.dtype
    qh, _ = _heads3(q, dtype)
    kh, _ = _heads3(k, dtype)
    vh, _ = _heads3(v, dtype)
    heads, n, d = qh.shape
    if heads != config.heads or d != config.head_dim:
        raise ValueError("input dims do not match config")
    gh = np.ones_like(qh) if g is None else _heads3(g, dtype)[0]
    maps = maps if maps is not None else FeatureMaps.identity(heads, d, dtype=dtype)
    c, lam, eps = config.chunk_size, config.lam, config.epsilon
    sf = _scale_factor(d, config.scale)
    feat = 2 * d

    t_chunks = -(-n // c)
    padded = t_chunks * c
    def pad(x):
        out = np.zeros((heads, padded, x.shape[-1]), dtype=dtype)
        out[:, :n] = x
        return out.reshape(heads, t_chunks, c, -1)
    qp, kp, vp, gp = pad(qh), pad(kh), pad(vh), pad(gh)
    valid = np.zeros((t_chunks, c), dtype=bool)
    valid.reshape(-1)[:n] = True

    phi_q = maps.phi_q_tokens(qp.reshape(heads, padded, d)).reshape(heads, t_chunks, c, feat)
    phi_k = maps.phi_k_tokens(kp.reshape(heads, padded, d)).reshape(heads, t_chunks, c, feat)

    rows = np.arange(c)[:, None]
    cols = np.arange(c)[None, :]
    low_diag = cols <= rows    # in-chunk causal, self included
    low_strict = cols < rows   # in-chunk causal, self excluded
    up = cols > rows           # previous-chunk tail (score window only)

    caches = [SalientCache(d, cap=config.cache_cap, dtype=dtype) for _ in range(heads)]
    s_run = np.zeros((heads, feat, d), dtype=dtype)
    z_run = np.zeros((heads, feat), dtype=dtype)
    la_folded = 0
    cache_k = np.empty((heads, 0, d), dtype=dtype)
    cache_v = np.empty((heads, 0, d), dtype=dtype)
    pending: dict[int, tuple] = {}

    y = np.empty_like(qp)
    out_d_sa = np.empty((heads, t_chunks, c), dtype=dtype)
    out_d_la = np.empty((heads, t_chunks, c), dtype=dtype)
    out_n_sa = np.empty_like(qp)
    floor = np.zeros((heads, t_chunks, c), dtype=bool)
    win_counts = np.empty((t_chunks, c), dtype=np.int64)
    cache_counts = np.empty((t_chunks, c), dtype=np.int64)
    la_counts = np.empty((t_chunks, c), dtype=np.int64)
    all_scores = np.empty((heads, t_chunks, c), dtype=dtype)
    la_mask_all = np.zeros((heads, t_chunks, c), dtype=bool)

    for t in range(t_chunks):
        qc = np.ascontiguousarray(qp[:, t])
        kc, vc, gc = kp[:, t], vp[:, t], gp[:, t]
        val_c = valid[t]
        s_in = qc @ kc.swapaxes(1, 2) * sf
        if t > 0:
            k_prev, v_prev, val_prev = kp[:, t - 1], vp[:, t - 1], valid[t - 1]
            s_prev = qc @ k_prev.swapaxes(1, 2) * sf

        # --- self-saliency scores over the trailing window -----------------
        diag_sup = low_diag & val_c[None, :]
        nodiag_sup = low_strict & val_c[None, :]
        if t > 0:
            prev_sup = up & val_prev[None, :]
            logits_row = np.concatenate([s_prev, s_in], axis=-1)
            diag_full = np.concatenate([prev_sup, diag_sup], axis=-1)
            nodiag_full = np.concatenate([prev_sup, nodiag_sup], axis=-1)
        else:
            logits_row = s_in
            diag_full, nodiag_full = diag_sup, nodiag_sup
        shape = logits_row.shape
        a_diag = _rows_softmax(logits_row, np.broadcast_to(diag_full, shape))
        a_nodiag = _rows_softmax(logits_row, np.broadcast_to(nodiag_full, shape))
        sc = (a_diag * np.log((a_diag + eps) / (a_nodiag + eps))).sum(axis=-1)
        sc = np.where(val_c[None, :], sc, -np.inf)
        all_scores[:, t] = sc

        # --- selection for this chunk (applied two chunks later) -----------
        sel_idx = np.stack([top_k_indices(sc[h], lam) for h in range(heads)]).astype(np.intp)
        sel_member = np.zeros((heads, c), dtype=bool)
        np.put_along_axis(sel_member, sel_idx, True, axis=1) if lam else None
        la_member = ~sel_member & val_c[None, :]
        la_mask_all[:, t] = la_member
        phi_masked = phi_k[:, t] * la_member[:, :, None]
        contrib_s = phi_masked.swapaxes(1, 2) @ vc
        contrib_z = phi_masked.sum(axis=1)
        pending[t] = (sel_idx, contrib_s, contrib_z, int(la_member[0].sum()))

        # --- commit the chunk that is now two behind ------------------------
        if t >= 2:
            sel_idx2, con_s, con_z, n_la_tokens = pending.pop(t - 2)
            for h in range(heads):
                idx = sel_idx2[h]
                idx = idx[valid[t - 2][idx]]
                caches[h].append(kp[h, t - 2, idx], vp[h, t - 2, idx],
                                 all_scores[h, t - 2, idx], (t - 2) * c + idx)
            s_run += con_s
            z_run += con_z
            la_folded += n_la_tokens
            cache_k, cache_v = _stack_caches(caches)

        # --- exact branch: cache + full previous chunk + in-chunk prefix ---
        if cache_k.shape[1]:
            ec = np.exp(qc @ cache_k.swapaxes(1, 2) * sf)
            n_sa = ec @ cache_v
            d_sa = ec.sum(axis=-1)
        else:
            n_sa = np.zeros((heads, c, d), dtype=dtype)
            d_sa = np.zeros((heads, c), dtype=dtype)
        if t > 0:
            e_prev = np.where(val_prev[None, None, :], np.exp(s_prev), 0.0)
            n_sa = n_sa + e_prev @ v_prev
            d_sa = d_sa + e_prev.sum(axis=-1)
        e_in = np.where(diag_sup[None, :, :], np.exp(s_in), 0.0)
        n_sa = n_sa + e_in @ vc
        d_sa = d_sa + e_in.sum(axis=-1)

        # --- kernel branch covers everything routed so far ------------------
        phi_qc = np.ascontiguousarray(phi_q[:, t])
        n_la = (phi_qc @ s_run) * gc
        d_la = (phi_qc * z_run[:, None, :]).sum(axis=-1)

        den = d_sa + d_la
        fl = den < DENOM_FLOOR
        den = np.where(fl, den + DENOM_FLOOR, den)
        y[:, t] = (n_sa + n_la) / den[..., None]
        out_n_sa[:, t] = n_sa
        out_d_sa[:, t], out_d_la[:, t], floor[:, t] = d_sa, d_la, fl
        win_counts[t] = np.arange(1, c + 1) + (c if t > 0 else 0)
        cache_counts[t] = cache_k.shape[1]
        la_counts[t] = la_folded

    def unpad(x):
        return x.reshape(heads, padded, *x.shape[3:])[:, :n]
    return HybridOutput(
        y=unpad(y), d_sa=unpad(out_d_sa), d_la=unpad(out_d_la),
        window_count=win_counts.reshape(-1)[:n], cache_count=cache_counts.reshape(-1)[:n],
        la_count=la_counts.reshape(-1)[:n], floor_flags=unpad(floor).astype(bool),
        n_sa=unpad(out_n_sa), scores=unpad(all_scores), la_mask=unpad(la_mask_all).astype(bool))


def output_error_curve(q, k, v, g, config: AttentionConfig, lam_grid,
                       maps: FeatureMaps | None = None) -> list[tuple[int, float]]:
    """Mean L2 gap between the hybrid output and full softmax, per lambda."""
    dtype = config.dtype
    qh, _ = _heads3(q, dtype)
    y_full = oracle_full_softmax(qh, _heads3(k, dtype)[0], _heads3(v, dtype)[0], scale=config.scale)
    out = []
    for lam in lam_grid:
        res = prefill_chunk_parallel(q, k, v, g, config.with_(lam=int(lam)), maps=maps)
        err = float(np.linalg.norm(res.y - y_full, axis=-1).mean())
        out.append((int(lam), err))
    return out
