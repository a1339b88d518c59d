"""Self-saliency scoring from sliding-window attention distributions.

A token's score measures how much its local attention distribution shifts when
the self term is removed: high score means the token leans on itself and is
worth keeping in exact softmax attention once it leaves the window.

Positions are 0-based throughout. Window rows are right-aligned: column i of a
width-w row holds key index ``t - w + 1 + i``, so the self key is always the
last column; columns that fall before position 0 are zero in both
distributions and contribute nothing to the score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import masked_softmax, top_k_indices


@dataclass(frozen=True)
class WindowSpec:
    radius: int
    scale: bool = True  # multiply logits by 1/sqrt(d)

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")


@dataclass
class ScoreReport:
    """Per-(token, head) self-saliency scores plus the parameters that made them."""

    scores: np.ndarray          # (H, N)
    window: int | None          # None = full-context
    epsilon: float
    scale: bool = True
    selected: np.ndarray | None = None  # optional (H, N) bool mask

    @property
    def heads(self) -> int:
        return self.scores.shape[0]

    @property
    def length(self) -> int:
        return self.scores.shape[1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["token_index", "head", "score", "selected"])
            for h in range(self.heads):
                for t in range(self.length):
                    sel = bool(self.selected[h, t]) if self.selected is not None else False
                    writer.writerow([t, h, repr(float(self.scores[h, t])), int(sel)])


def local_window(t: int, w: int, n: int) -> np.ndarray:
    """Index set {j : max(0, t-w+1) <= j <= t} of size min(t+1, w)."""
    if not 0 <= t < n:
        raise ValueError(f"position {t} outside [0, {n})")
    return np.arange(max(0, t - w + 1), t + 1)


def _per_head(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ValueError("expected (N, d) or (H, N, d)")


def swa_distributions(
    q: np.ndarray, k: np.ndarray, w: int, scale: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sliding-window attention rows with and without the self term.

    Returns (a_diag, a_nodiag, degenerate) of shapes (N, w), (N, w), (N,) for
    2-D inputs, with a leading head axis for 3-D inputs. Rows of a_diag sum to
    1; rows of a_nodiag sum to 1 except singleton windows, which are all-zero
    and flagged degenerate.
    """
    qh, kh = _per_head(q), _per_head(k)
    single = np.asarray(q).ndim == 2
    heads, n, d = qh.shape
    if kh.shape != qh.shape:
        raise ValueError("q and k shapes differ")
    w = int(w)
    if w < 1:
        raise ValueError("window must be >= 1")

    idx = np.arange(n)[:, None] - (w - 1) + np.arange(w)[None, :]  # (N, w)
    valid = idx >= 0
    gathered = kh[:, np.clip(idx, 0, None)]                        # (H, N, w, d)
    logits = np.einsum("hnd,hnwd->hnw", qh, gathered)
    if scale:
        logits = logits * (1.0 / np.sqrt(d))
    logits = logits.astype(qh.dtype, copy=False)

    a_diag = masked_softmax(logits.reshape(-1, w), np.broadcast_to(~valid, (heads, n, w)).reshape(-1, w))
    a_diag = a_diag.reshape(heads, n, w)

    nonself = valid.copy()
    nonself[:, w - 1] = False                                      # drop the self column
    degenerate = ~nonself.any(axis=1)                              # singleton windows
    a_nodiag = np.zeros_like(a_diag)
    rows = ~degenerate
    if rows.any():
        excl = np.broadcast_to(~nonself[rows], (heads, int(rows.sum()), w))
        sub = masked_softmax(logits[:, rows].reshape(-1, w), excl.reshape(-1, w))
        a_nodiag[:, rows] = sub.reshape(heads, -1, w)

    deg = np.broadcast_to(degenerate, (heads, n))
    if single:
        return a_diag[0], a_nodiag[0], deg[0]
    return a_diag, a_nodiag, deg


def scores_from_distributions(a_diag: np.ndarray, a_nodiag: np.ndarray, epsilon: float) -> np.ndarray:
    """Score_t = sum_j a_diag * log((a_diag + eps) / (a_nodiag + eps)).

    Zero-padded slots contribute log(eps/eps) = 0; an all-zero a_nodiag row
    (singleton window) reduces to log((1 + eps)/eps) automatically.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return (a_diag * np.log((a_diag + epsilon) / (a_nodiag + epsilon))).sum(axis=-1)


def self_saliency_scores(
    q: np.ndarray, k: np.ndarray, w: int, epsilon: float = 1e-6, scale: bool = True
) -> ScoreReport:
    a_diag, a_nodiag, _ = swa_distributions(_per_head(q), _per_head(k), w, scale)
    return ScoreReport(scores=scores_from_distributions(a_diag, a_nodiag, epsilon),
                       window=w, epsilon=epsilon, scale=scale)


def global_scores(q: np.ndarray, k: np.ndarray, epsilon: float = 1e-6, scale: bool = True) -> ScoreReport:
    """Scores with the full causal prefix as every token's window (w = t + 1)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    qh, kh = _per_head(q), _per_head(k)
    heads, n, d = qh.shape
    logits = np.einsum("hnd,hmd->hnm", qh, kh)
    if scale:
        logits = logits * (1.0 / np.sqrt(d))
    logits = logits.astype(qh.dtype, copy=False)

    causal = np.tril(np.ones((n, n), dtype=bool))
    flat = np.broadcast_to(causal, (heads, n, n)).reshape(-1, n)
    a_diag = masked_softmax(logits.reshape(-1, n), ~flat).reshape(heads, n, n)

    strict = np.tril(np.ones((n, n), dtype=bool), k=-1)
    a_nodiag = np.zeros_like(a_diag)
    if n > 1:
        excl = np.broadcast_to(~strict[1:], (heads, n - 1, n)).reshape(-1, n)
        sub = masked_softmax(logits[:, 1:].reshape(-1, n), excl)
        a_nodiag[:, 1:] = sub.reshape(heads, n - 1, n)

    scores = scores_from_distributions(a_diag, a_nodiag, epsilon)
    return ScoreReport(scores=scores, window=None, epsilon=epsilon, scale=scale)


def overlap_at_k(local: ScoreReport, global_: ScoreReport, k: int) -> float:
    """|top-k(local) ∩ top-k(global)| / k, averaged over heads."""
    if k <= 0:
        raise ValueError("k must be >= 1")
    if local.scores.shape != global_.scores.shape:
        raise ValueError("reports differ in shape")
    fracs = []
    for h in range(local.heads):
        a = set(top_k_indices(local.scores[h], k).tolist())
        b = set(top_k_indices(global_.scores[h], k).tolist())
        fracs.append(len(a & b) / k)
    return float(np.mean(fracs))
