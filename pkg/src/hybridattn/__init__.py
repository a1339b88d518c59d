"""Saliency-routed intra-layer hybrid softmax/linear attention.

Exact softmax attention over a local window plus a score-selected salient
cache, a norm-preserved kernel feature map for everything else, and three
interchangeable evaluation forms (streaming decode, naive reference,
chunk-wise parallel prefill) verified against brute-force oracles.
"""

from .config import AttentionConfig
from .engine import (DecodeSession, HybridOutput, decode_sequence, decode_step,
                     oracle_full_softmax, oracle_linear_attention, oracle_swa,
                     output_error_curve, prefill_chunk_parallel, reference_hybrid)
from .estimator import LinearizedAttention
from .featuremap import (FeatureMaps, gate_forward, hedgehog_map, np_map,
                         np_map_backward)
from .routing import LinearState, RoutingMasks, SalientCache, commit_chunk, reset, select_chunk
from .saliency import (ScoreReport, WindowSpec, global_scores, local_window,
                       overlap_at_k, self_saliency_scores, swa_distributions)
from .transfer import (TeacherLayer, TrainState, make_teacher, prepare_batch,
                       train_step, transfer_loss)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "DecodeSession", "HybridOutput", "FeatureMaps",
    "LinearizedAttention", "LinearState", "RoutingMasks", "SalientCache",
    "ScoreReport", "TeacherLayer", "TrainState", "WindowSpec",
    "commit_chunk", "decode_sequence", "decode_step", "gate_forward",
    "global_scores", "hedgehog_map", "local_window", "make_teacher",
    "np_map", "np_map_backward", "oracle_full_softmax",
    "oracle_linear_attention", "oracle_swa", "output_error_curve",
    "overlap_at_k", "prefill_chunk_parallel", "prepare_batch",
    "reference_hybrid", "reset", "select_chunk", "self_saliency_scores",
    "swa_distributions", "train_step", "transfer_loss",
]
