"""Stage-1 attention transfer at desk scale.

A frozen teacher layer (random seeded projections + exact causal softmax)
defines both the target outputs and the q/k/v the student inherits. Training
fits the per-head feature maps and the gate so the hybrid operator's outputs
match the teacher's under MSE.

Everything upstream of the trainables is frozen: scores, routing masks and the
exact-branch sums depend only on q/k/v, so they are computed once per batch
(TransferBatch) and reused across steps. Selection is held fixed in the
backward pass (no gradient through top-lambda).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .config import AttentionConfig
from .engine import oracle_full_softmax, prefill_chunk_parallel
from .featuremap import FeatureMaps, gate_backward, gate_forward, np_map_backward
from .numerics import make_rng


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherLayer:
    """Frozen projections + exact softmax attention; the distillation target."""

    wq: np.ndarray  # (model_dim, heads * head_dim)
    wk: np.ndarray
    wv: np.ndarray
    heads: int
    head_dim: int

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Hidden states (N, model_dim) -> per-head q, k, v of shape (H, N, d)."""
        n = x.shape[0]
        def split(w):
            return (x @ w).reshape(n, self.heads, self.head_dim).transpose(1, 0, 2)
        return split(self.wq), split(self.wk), split(self.wv)

    def outputs(self, x: np.ndarray, scale: bool = True) -> np.ndarray:
        q, k, v = self.project(x)
        return oracle_full_softmax(q, k, v, scale=scale)


def make_teacher(seed: int, model_dim: int, heads: int, head_dim: int) -> TeacherLayer:
    """Deterministic random teacher; init scale 1/sqrt(model_dim)."""
    rng = make_rng(seed)
    shape = (model_dim, heads * head_dim)
    std = 1.0 / np.sqrt(model_dim)
    arrays = [np.ascontiguousarray(rng.standard_normal(shape) * std) for _ in range(3)]
    for a in arrays:
        a.setflags(write=False)
    return TeacherLayer(wq=arrays[0], wk=arrays[1], wv=arrays[2], heads=heads, head_dim=head_dim)


# ---------------------------------------------------------------------------
# frozen per-batch quantities
# ---------------------------------------------------------------------------

@dataclass
class TransferBatch:
    """Teacher-side tensors for a batch, frozen with respect to the trainables."""

    x: np.ndarray         # (B, N, model_dim)
    q: np.ndarray         # (B, H, N, d)
    k: np.ndarray
    v: np.ndarray
    teacher_y: np.ndarray # (B, H, N, d)
    n_sa: np.ndarray      # (B, H, N, d) exact-branch numerator
    d_sa: np.ndarray      # (B, H, N)
    la_mask: np.ndarray   # (B, H, N) routed-to-linear mask per chunk

    @property
    def size(self) -> int:
        return self.x.shape[0]


def prepare_batch(teacher: TeacherLayer, x: np.ndarray, config: AttentionConfig) -> TransferBatch:
    """Precompute scores, routing and exact-branch sums for a batch of sequences."""
    x = np.asarray(x, dtype=config.dtype)
    if x.ndim == 2:
        x = x[None]
    b, n, _ = x.shape
    if n % config.chunk_size:
        raise ValueError("transfer requires the sequence length to be a chunk multiple")
    placeholder = FeatureMaps.identity(config.heads, config.head_dim, dtype=config.dtype)
    qs, ks, vs, tys, nsas, dsas, las = [], [], [], [], [], [], []
    for i in range(b):
        q, k, v = teacher.project(x[i])
        out = prefill_chunk_parallel(q, k, v, None, config, maps=placeholder)
        qs.append(q); ks.append(k); vs.append(v)
        tys.append(oracle_full_softmax(q, k, v, scale=config.scale))
        nsas.append(out.n_sa); dsas.append(out.d_sa); las.append(out.la_mask)
    return TransferBatch(x=x, q=np.stack(qs), k=np.stack(ks), v=np.stack(vs),
                         teacher_y=np.stack(tys), n_sa=np.stack(nsas),
                         d_sa=np.stack(dsas), la_mask=np.stack(las))


# ---------------------------------------------------------------------------
# train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    maps: FeatureMaps
    gate_w: np.ndarray          # (H, head_dim, model_dim)
    use_gate: bool = True
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0
    loss_history: list = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        out = {"feature_wq": self.maps.wq, "feature_wk": self.maps.wk}
        if self.use_gate:
            out["gate_w"] = self.gate_w
        return out

    def save(self, path: str | Path) -> None:
        tensorio.save_group(path, {"feature_wq": self.maps.wq, "feature_wk": self.maps.wk,
                                   "gate_w": self.gate_w},
                            meta={"kind": self.maps.kind, "use_gate": self.use_gate,
                                  "step_count": self.step_count,
                                  "roles": {"feature_wq": "per-head query feature map",
                                            "feature_wk": "per-head key feature map",
                                            "gate_w": "per-head gate projection"}})


def init_train_state(teacher: TeacherLayer, config: AttentionConfig, seed: int,
                     feature_kind: str = "np", use_gate: bool = True) -> TrainState:
    rng = make_rng(seed)
    h, d, dm = teacher.heads, teacher.head_dim, teacher.model_dim
    dtype = config.dtype
    std = 1.0 / np.sqrt(d)
    maps = FeatureMaps(wq=(rng.standard_normal((h, d, d)) * std).astype(dtype),
                       wk=(rng.standard_normal((h, d, d)) * std).astype(dtype),
                       kind=feature_kind)
    gate_w = (rng.standard_normal((h, d, dm)) / np.sqrt(dm)).astype(dtype)
    state = TrainState(maps=maps, gate_w=gate_w, use_gate=use_gate)
    for name, p in (("wq", maps.wq), ("wk", maps.wk), ("gate", gate_w)):
        state.adam_m[name] = np.zeros_like(p)
        state.adam_v[name] = np.zeros_like(p)
    return state


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _student_forward(state: TrainState, batch: TransferBatch, config: AttentionConfig,
                     need_grads: bool):
    """Hybrid outputs for every sequence, plus gradients of the batch MSE.

    The linear branch is recomputed (it carries the trainables); the exact
    branch and routing come from the frozen batch. Backward walks each einsum
    in reverse, with a suffix sum over chunks for the two-chunk state lag.
    """
    cfg = config
    c = cfg.chunk_size
    heads, d = cfg.heads, cfg.head_dim
    feat = 2 * d
    b, _, n, _ = batch.q.shape
    t_chunks = n // c
    total = batch.teacher_y.size

    loss = 0.0
    grads = {"wq": np.zeros_like(state.maps.wq), "wk": np.zeros_like(state.maps.wk),
             "gate": np.zeros_like(state.gate_w)}
    ys = np.empty_like(batch.teacher_y)

    for i in range(b):
        x, q, k, v = batch.x[i], batch.q[i], batch.k[i], batch.v[i]
        la = batch.la_mask[i]                                     # (H, N)
        if state.use_gate:
            g = gate_forward(x, state.gate_w.reshape(heads * d, -1)).reshape(n, heads, d).transpose(1, 0, 2)
        else:
            g = np.ones_like(q)
        phi_q = state.maps.phi_q_tokens(q)                        # (H, N, 2d)
        phi_k = state.maps.phi_k_tokens(k)
        phi_k_m = phi_k * la[..., None]

        qc = phi_q.reshape(heads, t_chunks, c, feat)
        kc = phi_k_m.reshape(heads, t_chunks, c, feat)
        vc = v.reshape(heads, t_chunks, c, d)
        gc = g.reshape(heads, t_chunks, c, d)

        con_s = np.einsum("htcf,htcd->htfd", kc, vc)
        con_z = kc.sum(axis=2)
        s_pre = np.concatenate([np.zeros_like(con_s[:, :2]), np.cumsum(con_s, axis=1)[:, :-2]], axis=1)
        z_pre = np.concatenate([np.zeros_like(con_z[:, :2]), np.cumsum(con_z, axis=1)[:, :-2]], axis=1)

        p = np.einsum("htcf,htfd->htcd", qc, s_pre)
        n_la = p * gc
        d_la = np.einsum("htcf,htf->htc", qc, z_pre)
        den = batch.d_sa[i].reshape(heads, t_chunks, c) + d_la
        y = (batch.n_sa[i].reshape(heads, t_chunks, c, d) + n_la) / den[..., None]
        ys[i] = y.reshape(heads, n, d)
        diff = ys[i] - batch.teacher_y[i]
        loss += float(np.square(diff).sum())

        if not need_grads:
            continue
        dy = (2.0 / total) * diff.reshape(heads, t_chunks, c, d)
        dn_la = dy / den[..., None]
        dden = -(dy * y).sum(axis=-1) / den
        dp = dn_la * gc
        dg = dn_la * p
        dphi_q = (np.einsum("htcd,htfd->htcf", dp, s_pre)
                  + np.einsum("htc,htf->htcf", dden, z_pre))
        ds_pre = np.einsum("htcf,htcd->htfd", qc, dp)
        dz_pre = np.einsum("htcf,htc->htf", qc, dden)
        s_suf = np.flip(np.cumsum(np.flip(ds_pre, 1), axis=1), 1)
        z_suf = np.flip(np.cumsum(np.flip(dz_pre, 1), axis=1), 1)
        dcon_s = np.concatenate([s_suf[:, 2:], np.zeros_like(s_suf[:, :2])], axis=1)
        dcon_z = np.concatenate([z_suf[:, 2:], np.zeros_like(z_suf[:, :2])], axis=1)
        dphi_k = (np.einsum("htfd,htcd->htcf", dcon_s, vc) + dcon_z[:, :, None, :])
        dphi_k = dphi_k.reshape(heads, n, feat) * la[..., None]
        dphi_q = dphi_q.reshape(heads, n, feat)

        for h in range(heads):
            grads["wq"][h] += _feature_backward(state.maps.kind, q[h], state.maps.wq[h], dphi_q[h])
            grads["wk"][h] += _feature_backward(state.maps.kind, k[h], state.maps.wk[h], dphi_k[h])
            if state.use_gate:
                grads["gate"][h] += gate_backward(x, state.gate_w[h], dg[h].reshape(n, d))[1]

    return loss / total, ys, grads


def _feature_backward(kind: str, x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if kind == "np":
        return np_map_backward(x, weight, upstream)[1]
    return _hedgehog_backward(x, weight, upstream)


def _hedgehog_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Weight gradient of hedgehog_map: the dual-softmax Jacobian without norm rescaling."""
    d = x.shape[-1]
    a = x @ weight.T
    def smax(z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    p, m = smax(a), smax(-a)
    dp, dm = upstream[:, :d], upstream[:, d:]
    da = p * (dp - (p * dp).sum(-1, keepdims=True)) - m * (dm - (m * dm).sum(-1, keepdims=True))
    return da.T @ x


def transfer_loss(batch, teacher: TeacherLayer, config: AttentionConfig, state: TrainState) -> float:
    """Batch MSE between teacher outputs and student hybrid outputs."""
    if not isinstance(batch, TransferBatch):
        batch = prepare_batch(teacher, batch, config)
    if batch.size == 0:
        raise ValueError("empty batch")
    loss, _, _ = _student_forward(state, batch, config, need_grads=False)
    return loss


def student_outputs(state: TrainState, batch: TransferBatch, config: AttentionConfig) -> np.ndarray:
    """Hybrid outputs (B, H, N, d) under the current trainables."""
    _, ys, _ = _student_forward(state, batch, config, need_grads=False)
    return ys


def transfer_grads(batch: TransferBatch, config: AttentionConfig, state: TrainState):
    loss, _, grads = _student_forward(state, batch, config, need_grads=True)
    return loss, grads


def train_step(state: TrainState, batch: TransferBatch, lr: float,
               config: AttentionConfig, betas=(0.9, 0.999), adam_eps: float = 1e-8) -> TrainState:
    """One Adam step on (f_q, f_k, W_g); selection stays fixed inside the step."""
    loss, grads = transfer_grads(batch, config, state)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name} at step {state.step_count}")
    state.step_count += 1
    b1, b2 = betas
    t = state.step_count
    updates = {"wq": state.maps.wq, "wk": state.maps.wk}
    if state.use_gate:
        updates["gate"] = state.gate_w
    for name, param in updates.items():
        g = grads[name]
        m, v = state.adam_m[name], state.adam_v[name]
        m[:] = b1 * m + (1 - b1) * g
        v[:] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + adam_eps)
    state.loss_history.append(loss)
    return state


# ---------------------------------------------------------------------------
# canned desk-scale task
# ---------------------------------------------------------------------------

DESK_MODEL_DIM = 64
DESK_BATCH = 8
DESK_SEQ_LEN = 128


def desk_config() -> AttentionConfig:
    return AttentionConfig(heads=2, head_dim=16, chunk_size=32, lam=4)


def make_desk_batch(seed: int, model_dim: int = DESK_MODEL_DIM,
                    batch: int = DESK_BATCH, n: int = DESK_SEQ_LEN) -> np.ndarray:
    """Synthetic Gaussian hidden-state sequences for the fixed transfer task."""
    rng = make_rng(seed)
    return rng.standard_normal((batch, n, model_dim))


def run_transfer(steps: int, seed: int, lr: float, config: AttentionConfig | None = None,
                 model_dim: int = DESK_MODEL_DIM, feature_kind: str = "np",
                 use_gate: bool = True) -> tuple[TrainState, TeacherLayer, TransferBatch]:
    """Train the desk-scale task from scratch; loss_history[0] is the initial loss."""
    config = config or desk_config()
    teacher = make_teacher(seed, model_dim, config.heads, config.head_dim)
    x = make_desk_batch(seed, model_dim=model_dim)
    batch = prepare_batch(teacher, x, config)
    state = init_train_state(teacher, config, seed, feature_kind=feature_kind, use_gate=use_gate)
    state.loss_history.append(transfer_loss(batch, teacher, config, state))
    for _ in range(steps):
        train_step(state, batch, lr, config)
    return state, teacher, batch


def write_loss_curve(path: str | Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])
