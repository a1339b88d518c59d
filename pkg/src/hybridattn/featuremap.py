"""Kernel feature maps for the linear-attention branch, and the output gate.

Two maps share the dual-softmax construction phi(x) = [softmax(u) ⊕ softmax(-u)]:

* hedgehog: u = f(x), a learnable linear projection of the input;
* norm-preserved: u = f(x) * ||x|| / ||f(x)||, so the projection only refines
  direction while the input's magnitude is re-injected before the softmaxes.

Backward passes are analytic (no autodiff): the softmax Jacobian composed with
the norm-rescaling chain rule, verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .numerics import make_rng

NORM_FLOOR = 1e-12


def _rows(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x)
    lead = x.shape[:-1]
    return x.reshape(-1, x.shape[-1]), lead


def _dual_softmax(u: np.ndarray) -> np.ndarray:
    """[softmax(u) ⊕ softmax(-u)] per row; each half sums to 1."""
    pieces = []
    for sign in (1.0, -1.0):
        z = sign * u
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        pieces.append(e / e.sum(axis=-1, keepdims=True))
    return np.concatenate(pieces, axis=-1)


def hedgehog_map(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """phi(x) = [softmax(f(x)) ⊕ softmax(-f(x))], f(x) = weight @ x (+ bias)."""
    flat, lead = _rows(x)
    a = flat @ np.asarray(weight).T
    if bias is not None:
        a = a + bias
    return _dual_softmax(a).reshape(*lead, -1)


def np_map_u(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
             norm_floor: float = NORM_FLOOR) -> np.ndarray:
    """The rescaled pre-softmax vector u = f(x) * ||x|| / ||f(x)|| (zero when flagged)."""
    flat, lead = _rows(x)
    a = flat @ np.asarray(weight).T
    if bias is not None:
        a = a + bias
    nx = np.sqrt(np.square(flat).sum(axis=-1))
    na = np.sqrt(np.square(a).sum(axis=-1))
    degenerate = na < norm_floor
    ratio = np.where(degenerate, 0.0, nx / np.where(degenerate, 1.0, na))
    return (a * ratio[:, None]).reshape(*lead, -1)


def np_map(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    norm_floor: float = NORM_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """Norm-preserved map: u = f(x) * ||x|| / ||f(x)||, then the dual softmax.

    Rows with ||f(x)|| below `norm_floor` have no usable direction; u is taken
    as the zero vector (uniform phi) and the row is flagged in the returned
    boolean mask.
    """
    flat, lead = _rows(x)
    a = flat @ np.asarray(weight).T
    if bias is not None:
        a = a + bias
    nx = np.sqrt(np.square(flat).sum(axis=-1))
    na = np.sqrt(np.square(a).sum(axis=-1))
    degenerate = na < norm_floor
    ratio = np.where(degenerate, 0.0, nx / np.where(degenerate, 1.0, na))
    u = a * ratio[:, None]
    phi = _dual_softmax(u)
    return phi.reshape(*lead, -1), degenerate.reshape(lead)


def np_map_backward(
    x: np.ndarray,
    weight: np.ndarray,
    upstream: np.ndarray,
    bias: np.ndarray | None = None,
    norm_floor: float = NORM_FLOOR,
) -> tuple[np.ndarray, np.ndarray] | tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of np_map contracted with `upstream` (same shape as phi).

    Returns (grad_x, grad_weight) summed over rows for the weight (plus
    grad_bias when a bias is passed). Rows at the norm floor get zero gradient
    for the direction term, matching the documented forward convention; the
    ||x|| re-injection term is likewise zeroed when x itself is at the floor.
    """
    flat, lead = _rows(x)
    d = flat.shape[-1]
    weight = np.asarray(weight)
    ups = np.asarray(upstream).reshape(-1, 2 * d)

    a = flat @ weight.T
    if bias is not None:
        a = a + bias
    nx = np.sqrt(np.square(flat).sum(axis=-1))
    na = np.sqrt(np.square(a).sum(axis=-1))
    degenerate = na < norm_floor
    na_safe = np.where(degenerate, 1.0, na)
    ratio = np.where(degenerate, 0.0, nx / na_safe)
    u = a * ratio[:, None]

    # softmax Jacobian on each half: J(p)^T d = p ⊙ (d - p·d)
    def smax(z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    p, m = smax(u), smax(-u)
    dp, dm = ups[:, :d], ups[:, d:]
    du = p * (dp - (p * dp).sum(-1, keepdims=True)) - m * (dm - (m * dm).sum(-1, keepdims=True))

    a_hat = a / na_safe[:, None]
    adot = (a_hat * du).sum(-1)
    da = ratio[:, None] * (du - a_hat * adot[:, None])
    da[degenerate] = 0.0

    x_floor = nx < norm_floor
    nx_safe = np.where(x_floor, 1.0, nx)
    dnorm = np.where(degenerate | x_floor, 0.0, adot)
    dx = da @ weight + dnorm[:, None] * (flat / nx_safe[:, None])
    dweight = da.T @ flat
    if bias is not None:
        return dx.reshape(*lead, d), dweight, da.sum(axis=0)
    return dx.reshape(*lead, d), dweight


def gate_forward(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """g = logistic(weight @ x); entries strictly inside (0, 1).

    Saturated logits would round to exactly 0 or 1 in floating point, so the
    result is clamped to the nearest representable interior values.
    """
    flat, lead = _rows(x)
    z = flat @ np.asarray(weight).T
    ez = np.exp(-np.abs(z))
    g = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    g = np.clip(g, np.finfo(g.dtype).tiny, 1.0 - np.finfo(g.dtype).epsneg)
    return g.reshape(*lead, -1)


def gate_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of gate_forward contracted with `upstream`; weight grad summed over rows."""
    flat, lead = _rows(x)
    weight = np.asarray(weight)
    ups = np.asarray(upstream).reshape(flat.shape[0], -1)
    z = flat @ weight.T
    ez = np.exp(-np.abs(z))
    g = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    dz = ups * g * (1.0 - g)
    return (dz @ weight).reshape(*lead, -1), dz.T @ flat


@dataclass
class FeatureMaps:
    """Per-head q/k feature-map weights, shared by the engine and trainer.

    kind selects the map: "np" (norm-preserved) or "hedgehog".
    """

    wq: np.ndarray  # (H, d, d)
    wk: np.ndarray  # (H, d, d)
    kind: str = "np"

    def __post_init__(self):
        if self.kind not in ("np", "hedgehog"):
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.wq.shape != self.wk.shape or self.wq.ndim != 3 or self.wq.shape[1] != self.wq.shape[2]:
            raise ValueError("feature map weights must be (H, d, d)")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    def _apply(self, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
        if self.kind == "np":
            return np_map(x, weight)[0]
        return hedgehog_map(x, weight)

    def phi_q(self, x: np.ndarray, head: int) -> np.ndarray:
        return self._apply(x, self.wq[head])

    def phi_k(self, x: np.ndarray, head: int) -> np.ndarray:
        return self._apply(x, self.wk[head])

    def _multihead(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """x (H, ..., d) with per-head weights -> phi (H, ..., 2d)."""
        x = np.ascontiguousarray(x)
        if x.ndim == 2:
            a = (weights @ x[:, :, None])[:, :, 0]
        else:
            a = x @ weights.swapaxes(-1, -2)
        if self.kind == "np":
            nx = np.sqrt(np.square(x).sum(axis=-1))
            na = np.sqrt(np.square(a).sum(axis=-1))
            degenerate = na < NORM_FLOOR
            ratio = np.where(degenerate, 0.0, nx / np.where(degenerate, 1.0, na))
            a = a * ratio[..., None]
        return _dual_softmax(a)

    # per-token form used by the recurrent/naive paths (one call per step,
    # shared so the two paths agree bit for bit)
    def phi_q_rows(self, x: np.ndarray) -> np.ndarray:
        return self._multihead(x, self.wq)

    def phi_k_rows(self, x: np.ndarray) -> np.ndarray:
        return self._multihead(x, self.wk)

    # token-batched form for the chunk-parallel and training paths
    def phi_q_tokens(self, x: np.ndarray) -> np.ndarray:
        return self._multihead(x, self.wq)

    def phi_k_tokens(self, x: np.ndarray) -> np.ndarray:
        return self._multihead(x, self.wk)

    @classmethod
    def identity(cls, heads: int, dim: int, kind: str = "np", dtype=np.float64) -> "FeatureMaps":
        eye = np.broadcast_to(np.eye(dim, dtype=dtype), (heads, dim, dim)).copy()
        return cls(wq=eye, wk=eye.copy(), kind=kind)

    @classmethod
    def random(cls, heads: int, dim: int, seed: int, kind: str = "np", dtype=np.float64) -> "FeatureMaps":
        rng = make_rng(seed)
        shape = (heads, dim, dim)
        std = 1.0 / np.sqrt(dim)
        return cls(wq=(rng.standard_normal(shape) * std).astype(dtype),
                   wk=(rng.standard_normal(shape) * std).astype(dtype), kind=kind)

    def save(self, path: str | Path) -> None:
        tensorio.save_group(path, {"feature_wq": self.wq, "feature_wk": self.wk},
                            meta={"kind": self.kind, "roles": {"feature_wq": "query map per head",
                                                               "feature_wk": "key map per head"}})

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMaps":
        tensors, meta = tensorio.load_group(path)
        return cls(wq=tensors["feature_wq"], wk=tensors["feature_wk"], kind=meta.get("kind", "np"))
