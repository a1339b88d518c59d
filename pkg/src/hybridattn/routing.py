"""Delayed-selection state: salient cache, linear-attention KV state, chunk routing.

Each (sequence, head) owns one cache + state pair; a chunk is routed exactly
once, two chunks after its tokens were queries. Promotion takes the chunk's
top-lambda tokens by self-saliency score; everything else is folded into the
running (s, z) sums of the linear branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .numerics import top_k_indices


@dataclass
class RoutingMasks:
    """Intra-chunk index partition: exactly lambda promoted, rest to the linear branch."""

    sa_indices: np.ndarray  # sorted ascending, 0-based within the chunk
    la_indices: np.ndarray

    def check(self, chunk_size: int) -> None:
        merged = np.concatenate([self.sa_indices, self.la_indices])
        if sorted(merged.tolist()) != list(range(chunk_size)):
            raise ValueError("masks do not partition the chunk")


def select_chunk(scores: np.ndarray, lam: int) -> RoutingMasks:
    """Top-lambda promotion with ties to the smaller index; both sides ascending."""
    scores = np.asarray(scores)
    c = scores.shape[0]
    sa = top_k_indices(scores, lam)
    keep = np.ones(c, dtype=bool)
    keep[sa] = False
    return RoutingMasks(sa_indices=sa, la_indices=np.flatnonzero(keep))


class SalientCache:
    """Promoted key/value pairs for one head, with scores and origin positions.

    Stored columnar (arrays, not tuples) for cheap stacking; `cap` is the
    optional global budget B. Eviction drops the lowest-score entry first,
    ties broken toward the oldest origin.
    """

    def __init__(self, head_dim: int, cap: int | None = None, dtype=np.float64):
        self.cap = cap
        self.keys = np.empty((0, head_dim), dtype=dtype)
        self.values = np.empty((0, head_dim), dtype=dtype)
        self.scores = np.empty(0, dtype=dtype)
        self.origins = np.empty(0, dtype=np.int64)
        self.total_promoted = 0  # lifetime count, ignoring eviction

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, keys: np.ndarray, values: np.ndarray, scores: np.ndarray, origins: np.ndarray) -> None:
        origins = np.asarray(origins, dtype=np.int64)
        if len(origins) and not (np.diff(origins) > 0).all():
            raise ValueError("origin indices must be strictly increasing within a batch")
        self.keys = np.concatenate([self.keys, keys], axis=0)
        self.values = np.concatenate([self.values, values], axis=0)
        self.scores = np.concatenate([self.scores, scores])
        self.origins = np.concatenate([self.origins, origins])
        self.total_promoted += len(origins)
        self._enforce_cap()

    def _enforce_cap(self) -> None:
        if self.cap is None or len(self) <= self.cap:
            return
        # smallest (score, origin) pairs go first; keep survivors in origin order
        order = np.lexsort((self.origins, self.scores))
        drop = order[: len(self) - self.cap]
        keep = np.ones(len(self), dtype=bool)
        keep[drop] = False
        self.keys = self.keys[keep]
        self.values = self.values[keep]
        self.scores = self.scores[keep]
        self.origins = self.origins[keep]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {
            "cache_keys": self.keys.copy(),
            "cache_values": self.values.copy(),
            "cache_scores": self.scores.copy(),
            "cache_origins": self.origins.astype(np.float64),
        }

    def restore(self, arrays: dict[str, np.ndarray], total_promoted: int) -> None:
        self.keys = arrays["cache_keys"].copy()
        self.values = arrays["cache_values"].copy()
        self.scores = arrays["cache_scores"].copy()
        self.origins = arrays["cache_origins"].astype(np.int64)
        self.total_promoted = total_promoted


class LinearState:
    """Running sums for one head: s = sum phi(k)^T v, z = sum phi(k)^T."""

    def __init__(self, head_dim: int, feat_dim: int, dtype=np.float64):
        self.s = np.zeros((feat_dim, head_dim), dtype=dtype)
        self.z = np.zeros(feat_dim, dtype=dtype)
        self.count = 0

    def absorb(self, phi_k: np.ndarray, v: np.ndarray) -> None:
        """Fold one token in; callers absorb tokens in ascending position order."""
        self.s += np.outer(phi_k, v)
        self.z += phi_k
        self.count += 1

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"state_s": self.s.copy(), "state_z": self.z.copy()}

    def restore(self, arrays: dict[str, np.ndarray], count: int) -> None:
        self.s = arrays["state_s"].copy()
        self.z = arrays["state_z"].copy()
        self.count = count


def commit_chunk(
    cache: SalientCache,
    state: LinearState,
    chunk_k: np.ndarray,
    chunk_v: np.ndarray,
    phi_rows: np.ndarray,
    masks: RoutingMasks,
    chunk_scores: np.ndarray,
    origin_base: int,
) -> tuple[SalientCache, LinearState]:
    """Apply one routing decision: promote masked tokens, fold the rest into (s, z).

    `phi_rows` holds phi(k) for every chunk token; only the LA-routed rows are
    absorbed, in ascending order, so incremental and replayed-from-scratch
    states agree bit for bit. Mutates and returns (cache, state).
    """
    sa, la = masks.sa_indices, masks.la_indices
    cache.append(chunk_k[sa], chunk_v[sa], chunk_scores[sa], origin_base + sa)
    for i in la:
        state.absorb(phi_rows[i], chunk_v[i])
    return cache, state


def reset(head_dim: int, feat_dim: int, cap: int | None = None, dtype=np.float64) -> tuple[SalientCache, LinearState]:
    """Fresh (empty cache, zero state) pair for one head."""
    return SalientCache(head_dim, cap=cap, dtype=dtype), LinearState(head_dim, feat_dim, dtype=dtype)


def save_snapshot(path: str | Path, caches: list[SalientCache], states: list[LinearState], meta: dict | None = None) -> None:
    """Serialize per-head cache/state pairs for decode-resume tests."""
    tensors: dict[str, np.ndarray] = {}
    extra = dict(meta or {})
    extra["heads"] = len(caches)
    extra["counts"] = [st.count for st in states]
    extra["total_promoted"] = [c.total_promoted for c in caches]
    extra["caps"] = [c.cap for c in caches]
    for h, (c, st) in enumerate(zip(caches, states)):
        for name, arr in {**c.snapshot(), **st.snapshot()}.items():
            tensors[f"h{h}_{name}"] = arr
    tensorio.save_group(path, tensors, meta=extra)


def load_snapshot(path: str | Path, dtype=np.float64) -> tuple[list[SalientCache], list[LinearState], dict]:
    tensors, meta = tensorio.load_group(path)
    heads = meta["heads"]
    caches, states = [], []
    for h in range(heads):
        sub = {k[len(f"h{h}_"):]: v.astype(dtype) for k, v in tensors.items() if k.startswith(f"h{h}_")}
        head_dim = sub["state_s"].shape[1]
        feat_dim = sub["state_s"].shape[0]
        cache = SalientCache(head_dim, cap=meta["caps"][h], dtype=dtype)
        cache.restore(sub, meta["total_promoted"][h])
        state = LinearState(head_dim, feat_dim, dtype=dtype)
        state.restore(sub, meta["counts"][h])
        caches.append(cache)
        states.append(state)
    return caches, states, meta
