"""Synthetic retrieval tasks, budget-matched router comparison, and benchmarks.

The planted task is a desk-scale needle-in-a-haystack: a handful of positions
get keys aligned with a probe direction and boosted in norm, so late queries
put outsized attention mass on them and their own attention leans on the self
term (high self-saliency). Construction strength is checked empirically via
attention_mass_ratio, not assumed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AttentionConfig
from .engine import DecodeSession, oracle_full_softmax, prefill_chunk_parallel
from .featuremap import FeatureMaps
from .numerics import make_rng, top_k_indices
from .routing import SalientCache
from .saliency import global_scores, overlap_at_k, self_saliency_scores


# ---------------------------------------------------------------------------
# planted retrieval task
# ---------------------------------------------------------------------------

@dataclass
class PlantedTask:
    q: np.ndarray          # (H, N, d)
    k: np.ndarray
    v: np.ndarray
    planted: np.ndarray    # positions of planted salient tokens, ascending
    payload_index: int     # the needle carrying the retrieval payload
    seed: int
    probe_tokens: int      # trailing queries aligned with the probe direction

    @property
    def length(self) -> int:
        return self.q.shape[1]


def generate_planted(seed: int, n: int, d: int, needles: int, heads: int = 1,
                     exclude_last: int | None = None, probe_tokens: int = 32,
                     align: float = 2.0) -> PlantedTask:
    """Draw an isotropic task and plant `needles` salient positions.

    Planted keys point along a shared unit direction with norm boosted to
    align*sqrt(d); the matching query component makes the self logit ~align^2
    and the trailing `probe_tokens` queries get the same component so the
    needles are retrievable. Positions avoid the last `exclude_last` tokens
    (default: the probe region).
    """
    if needles >= n:
        raise ValueError("need fewer needles than tokens")
    if exclude_last is None:
        exclude_last = probe_tokens
    rng = make_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    q = rng.standard_normal((heads, n, d))
    k = rng.standard_normal((heads, n, d))
    v = rng.standard_normal((heads, n, d))
    limit = max(n - exclude_last, 1)
    planted = np.sort(rng.choice(limit, size=needles, replace=False)) if needles else np.empty(0, dtype=np.int64)
    for p in planted:
        k[:, p] = align * np.sqrt(d) * u + 0.5 * rng.standard_normal((heads, d))
        q[:, p] += align * u
    q[:, n - probe_tokens:] += align * u
    payload = int(planted[0]) if needles else -1
    return PlantedTask(q=q, k=k, v=v, planted=planted.astype(np.int64),
                       payload_index=payload, seed=seed, probe_tokens=probe_tokens)


def attention_mass_ratio(task: PlantedTask, scale: bool = True) -> float:
    """Mean full-softmax mass on planted vs non-planted positions, over probe queries."""
    heads, n, d = task.q.shape
    sf = 1.0 / np.sqrt(d) if scale else 1.0
    probe = np.arange(n - task.probe_tokens, n)
    ratios = []
    for h in range(heads):
        logits = task.q[h, probe] @ task.k[h].T * sf
        mask = np.arange(n)[None, :] <= probe[:, None]
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(logits), 0.0)
        a = e / e.sum(axis=-1, keepdims=True)
        mass = a.mean(axis=0)
        planted_mask = np.zeros(n, dtype=bool)
        planted_mask[task.planted] = True
        eligible = np.arange(n) < probe[0]
        ratios.append(mass[planted_mask].mean() / mass[~planted_mask & eligible].mean())
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# budget-matched routing comparison
# ---------------------------------------------------------------------------

@dataclass
class RecallResult:
    router: str
    budget: int
    recall: float
    cache_entries: int
    window_tokens: int
    retained_total: int
    budget_mode: str


def _final_window(n: int, c: int) -> tuple[int, int]:
    """(start, size) of the exact-attention window at the last query."""
    c0 = (n - 1) // c
    start = max(c0 - 1, 0) * c
    return start, n - start


def routing_recall(task: PlantedTask, router: str, budget: int, config: AttentionConfig,
                   budget_mode: str = "joint", router_seed: int | None = None) -> RecallResult:
    """Fraction of planted positions retained in (cache ∪ window) at the last query.

    Every router retains at most `budget` tokens. The position router spends
    the entire budget on a trailing window (the position-biased baseline). The
    saliency and random routers keep the operator's window and spread the
    remaining budget over chunks as a per-chunk top-k, with score-based
    eviction enforcing the global cap; "random" replaces the scores with
    seeded uniforms. budget_mode "joint" counts window + cache against the
    budget; "cache-only" counts cache entries alone.
    """
    if budget > task.length:
        raise ValueError("budget exceeds sequence length")
    if budget_mode not in ("joint", "cache-only"):
        raise ValueError(f"unknown budget_mode {budget_mode!r}")
    heads, n, d = task.q.shape
    c = config.chunk_size
    planted = set(task.planted.tolist())
    if not planted:
        raise ValueError("task has no planted positions")

    if router == "position":
        window = set(range(max(n - budget, 0), n))
        hits = len(planted & window)
        return RecallResult(router=router, budget=budget, recall=hits / len(planted),
                            cache_entries=0, window_tokens=min(budget, n),
                            retained_total=min(budget, n), budget_mode=budget_mode)

    win_start, win_size = _final_window(n, c)
    if budget_mode == "joint":
        cap = budget - win_size
        if cap < 0:
            raise ValueError(f"budget {budget} cannot cover the {win_size}-token window; shrink chunk_size")
    else:
        cap = budget

    if router == "saliency":
        scores = self_saliency_scores(task.q, task.k, w=c, epsilon=config.epsilon,
                                      scale=config.scale).scores
    elif router == "random":
        rng = make_rng(task.seed + 7919 if router_seed is None else router_seed)
        scores = rng.random((heads, n))
    else:
        raise ValueError(f"unknown router {router!r}")

    routed_chunks = max((n - 1) // c - 1, 0)
    lam_eff = min(c, -(-cap // routed_chunks)) if routed_chunks else 0
    caches = [SalientCache(d, cap=cap) for _ in range(heads)]
    for r in range(routed_chunks):
        lo = r * c
        for h in range(heads):
            sel = top_k_indices(scores[h, lo:lo + c], lam_eff)
            caches[h].append(task.k[h, lo + sel], task.v[h, lo + sel],
                             scores[h, lo + sel], lo + sel)

    window = set(range(win_start, n))
    recalls = []
    for h in range(heads):
        kept = window | set(caches[h].origins.tolist())
        recalls.append(len(planted & kept) / len(planted))
    cache_entries = len(caches[0])
    retained = cache_entries + win_size
    if budget_mode == "joint" and retained > budget:
        raise AssertionError("budget accounting violated")
    return RecallResult(router=router, budget=budget, recall=float(np.mean(recalls)),
                        cache_entries=cache_entries, window_tokens=win_size,
                        retained_total=retained, budget_mode=budget_mode)


# ---------------------------------------------------------------------------
# local/global consistency
# ---------------------------------------------------------------------------

def consistency_report(q: np.ndarray, k: np.ndarray, w: int, epsilon: float, top_k: int,
                       scale: bool = True) -> dict:
    """Overlap between window-w and full-context top-k selections vs the k/N baseline."""
    local = self_saliency_scores(q, k, w=w, epsilon=epsilon, scale=scale)
    glob = global_scores(q, k, epsilon=epsilon, scale=scale)
    overlap = overlap_at_k(local, glob, top_k)
    return {"window": w, "k": top_k, "overlap": overlap,
            "random_baseline": top_k / local.length,
            "heads": local.heads, "length": local.length}


# ---------------------------------------------------------------------------
# wall-time scaling benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchRecord:
    mode: str
    n: int
    wall_time: float               # median seconds across repetitions
    per_step_median: float | None  # decode only
    peak_state: int                # cache entries + state scalars + window tokens
    reps: int
    config: dict = field(default_factory=dict)


def _bench_inputs(n: int, config: AttentionConfig, seed: int):
    rng = make_rng(seed)
    shape = (config.heads, n, config.head_dim)
    return (rng.standard_normal(shape).astype(config.dtype) for _ in range(3))


def _state_scalars(config: AttentionConfig) -> int:
    d = config.head_dim
    return config.heads * (2 * d * d + 2 * d)


def bench(mode: str, lens, config: AttentionConfig, reps: int = 3, seed: int = 0,
          maps: FeatureMaps | None = None) -> list[BenchRecord]:
    """Median wall time and peak resident state per sequence length."""
    if reps < 3:
        raise ValueError("need at least 3 repetitions")
    if mode not in ("prefill", "decode"):
        raise ValueError(f"unknown mode {mode!r}")
    records = []
    for n in lens:
        q, k, v = _bench_inputs(int(n), config, seed)
        walls, step_medians, peaks = [], [], []
        for _ in range(reps):
            if mode == "prefill":
                t0 = time.perf_counter()
                out = prefill_chunk_parallel(q, k, v, None, config, maps=maps)
                walls.append(time.perf_counter() - t0)
                peaks.append(int(config.heads * (out.cache_count.max() + out.window_count.max()))
                             + _state_scalars(config))
            else:
                session = DecodeSession(config, maps=maps)
                steps = np.empty(int(n))
                peak = 0
                t0 = time.perf_counter()
                for t in range(int(n)):
                    s0 = time.perf_counter()
                    session.step(q[:, t], k[:, t], v[:, t])
                    steps[t] = time.perf_counter() - s0
                    peak = max(peak, len(session.caches[0]) + session._win_len)
                walls.append(time.perf_counter() - t0)
                step_medians.append(float(np.median(steps)))
                peaks.append(config.heads * peak + _state_scalars(config))
        records.append(BenchRecord(
            mode=mode, n=int(n), wall_time=float(np.median(walls)),
            per_step_median=float(np.median(step_medians)) if step_medians else None,
            peak_state=int(max(peaks)), reps=reps, config=config.to_json()))
    return records


def loglog_slope(records: list[BenchRecord]) -> float:
    """Least-squares slope of log(wall_time) against log(n)."""
    xs = np.log([r.n for r in records])
    ys = np.log([r.wall_time for r in records])
    return float(np.polyfit(xs, ys, 1)[0])


def write_bench_csv(records: list[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n", "wall_time_s", "per_step_median_s", "peak_state", "reps"])
        for r in records:
            writer.writerow([r.mode, r.n, repr(r.wall_time),
                             "" if r.per_step_median is None else repr(r.per_step_median),
                             r.peak_state, r.reps])


def read_bench_csv(path: str | Path) -> list[BenchRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(BenchRecord(
                mode=row["mode"], n=int(row["n"]), wall_time=float(row["wall_time_s"]),
                per_step_median=float(row["per_step_median_s"]) if row["per_step_median_s"] else None,
                peak_state=int(row["peak_state"]), reps=int(row["reps"])))
    return records
