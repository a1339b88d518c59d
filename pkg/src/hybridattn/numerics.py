"""Dense numerical substrate: stable softmax, products, norms, scans, top-k, RNG.

All functions operate on plain numpy arrays (float32 or float64) and are pure.
Summation inside products/reductions is delegated to numpy, which is
deterministic for fixed inputs on a given platform; that is what the
cross-form bit-reproducibility tests rely on.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

#: guard for near-zero denominators in kernelized attention
DENOM_FLOOR = 1e-12


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'f32' or 'f64'")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def masked_softmax(logits: np.ndarray, excluded: np.ndarray | None = None) -> np.ndarray:
    """Row softmax with per-row support exclusion.

    `excluded` is a boolean array (True = excluded from the support), same shape
    as `logits`. Excluded entries are exactly 0 in the result; supported entries
    are normalized with per-row max subtraction. A fully excluded row raises.
    """
    logits = np.asarray(logits)
    if logits.ndim == 1:
        return masked_softmax(logits[None, :], None if excluded is None else np.asarray(excluded)[None, :])[0]
    if excluded is None:
        supported = np.ones(logits.shape, dtype=bool)
    else:
        supported = ~np.asarray(excluded, dtype=bool)
        if supported.shape != logits.shape:
            raise ValueError("exclusion mask shape mismatch")
    if not supported.any(axis=-1).all():
        raise ValueError("empty softmax support")
    neg = np.array(-np.inf, dtype=logits.dtype)
    shifted = np.where(supported, logits, neg)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(supported, np.exp(shifted), logits.dtype.type(0))
    return e / e.sum(axis=-1, keepdims=True)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def l2_norm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """sqrt of sum of squares along `axis`."""
    x = np.asarray(x)
    return np.sqrt(np.square(x).sum(axis=axis))


def chunked_cumsum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inclusive prefix sums along `axis` (element t = sum of elements 0..t)."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for ndim {x.ndim}")
    return np.cumsum(x, axis=axis)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices (0-based, sorted ascending) of the k largest scores.

    Ties are broken toward the smaller index, so the result is deterministic
    and permutation-stable.
    """
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if scores.ndim != 1:
        raise ValueError("top_k_indices expects a 1-D score row")
    if not 0 <= k <= n:
        raise ValueError(f"k={k} out of range for length {n}")
    if k == 0:
        return np.empty(0, dtype=np.intp)
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:k])
