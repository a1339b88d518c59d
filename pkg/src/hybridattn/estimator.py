"""sklearn-style facade: fit = stage-1 attention transfer, transform = hybrid outputs.

The estimator wraps a frozen random teacher layer and the trainable hybrid
operator so the pipeline composes with the usual sklearn tooling
(get_params/set_params, clone, fit_transform).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import AttentionConfig
from .transfer import (TrainState, init_train_state, make_teacher, prepare_batch,
                       student_outputs, train_step, transfer_loss)


class LinearizedAttention(TransformerMixin, BaseEstimator):
    """Distill a frozen softmax-attention layer into the hybrid operator.

    fit(X) builds a seeded teacher over the hidden-state sequences X of shape
    (n_sequences, seq_len, model_dim) and trains the feature maps and gate;
    transform(X) returns the student's attention outputs with heads
    concatenated, shape (n_sequences, seq_len, heads * head_dim).
    """

    def __init__(self, heads=2, head_dim=16, chunk_size=32, lam=4, epsilon=1e-6,
                 scale=True, cache_cap=None, precision="f64", feature_kind="np",
                 use_gate=True, steps=200, lr=1e-2, seed=0):
        self.heads = heads
        self.head_dim = head_dim
        self.chunk_size = chunk_size
        self.lam = lam
        self.epsilon = epsilon
        self.scale = scale
        self.cache_cap = cache_cap
        self.precision = precision
        self.feature_kind = feature_kind
        self.use_gate = use_gate
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def _config(self) -> AttentionConfig:
        return AttentionConfig(heads=self.heads, head_dim=self.head_dim,
                               chunk_size=self.chunk_size, lam=self.lam,
                               epsilon=self.epsilon, cache_cap=self.cache_cap,
                               scale=self.scale, seed=self.seed, precision=self.precision)

    def _validate(self, X, reset: bool) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ValueError("X must be (n_sequences, seq_len, model_dim)")
        if not np.isfinite(X).all():
            raise ValueError("X contains non-finite values")
        if X.shape[1] % self.chunk_size:
            raise ValueError("seq_len must be a multiple of chunk_size")
        if reset:
            self.n_features_in_ = X.shape[2]
        elif X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected model_dim {self.n_features_in_}, got {X.shape[2]}")
        return X

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        config = self._config()
        self.teacher_ = make_teacher(self.seed, self.n_features_in_, self.heads, self.head_dim)
        batch = prepare_batch(self.teacher_, X, config)
        self.state_: TrainState = init_train_state(self.teacher_, config, self.seed,
                                                   feature_kind=self.feature_kind,
                                                   use_gate=self.use_gate)
        self.state_.loss_history.append(transfer_loss(batch, self.teacher_, config, self.state_))
        for _ in range(self.steps):
            train_step(self.state_, batch, self.lr, config)
        self.loss_curve_ = list(self.state_.loss_history)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before transform/score")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        X = self._validate(X, reset=False)
        batch = prepare_batch(self.teacher_, X, self._config())
        ys = student_outputs(self.state_, batch, self._config())  # (B, H, N, d)
        b, h, n, d = ys.shape
        return ys.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    def score(self, X, y=None) -> float:
        """Negative transfer MSE (higher is better), so grid search maximizes fit."""
        self._check_fitted()
        X = self._validate(X, reset=False)
        batch = prepare_batch(self.teacher_, X, self._config())
        return -transfer_loss(batch, self.teacher_, self._config(), self.state_)
