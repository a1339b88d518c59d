"""Operator configuration and its JSON wire format.

JSON schema (all CLI subcommands accept it via --config):
{"heads", "head_dim", "chunk_size", "lambda", "epsilon",
 "cache_cap" (null = unbounded), "scale" (bool), "seed", "precision"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import dtype_of


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    head_dim: int = 32
    chunk_size: int = 64          # also the sliding-window span used for scoring
    lam: int = 8                  # per-chunk salient-token budget
    epsilon: float = 1e-6
    cache_cap: int | None = None  # None = unbounded salient cache
    scale: bool = True            # apply 1/sqrt(head_dim) to every logit
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0 <= self.lam <= self.chunk_size:
            raise ValueError("lambda must satisfy 0 <= lambda <= chunk_size")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.cache_cap is not None and self.cache_cap < 0:
            raise ValueError("cache_cap must be >= 0 or null")
        dtype_of(self.precision)

    @property
    def dtype(self) -> np.dtype:
        return dtype_of(self.precision)

    def with_(self, **kw) -> "AttentionConfig":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return {
            "heads": self.heads,
            "head_dim": self.head_dim,
            "chunk_size": self.chunk_size,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "cache_cap": self.cache_cap,
            "scale": self.scale,
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttentionConfig":
        known = {
            "heads": "heads", "head_dim": "head_dim", "chunk_size": "chunk_size",
            "lambda": "lam", "epsilon": "epsilon", "cache_cap": "cache_cap",
            "scale": "scale", "seed": "seed", "precision": "precision",
        }
        unknown = set(obj) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{known[k]: v for k, v in obj.items()})

    @classmethod
    def load(cls, path: str | Path) -> "AttentionConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))
