"""Student encoders: a small 1-D ResNet over ECG windows and a token
encoder (embedding table, mean pool, MLP), both ending in the shared
mu / log-variance projection heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Conv1d,
    Dense,
    GlobalAvgPool,
    ParamStore,
    Relu,
    ResidualBlock1d,
    ShapeError,
    Tensor,
    forward_graph,
)
from .prob_embed import ProbEmbedding, ProjectionHeads

__all__ = [
    "EcgEncoderConfig",
    "TextEncoderConfig",
    "TokenSequence",
    "EcgEncoder",
    "TextEncoder",
]

PAD_TOKEN = 0
MAX_TOKENS = 244


@dataclass
class EcgEncoderConfig:
    leads: int = 12
    samples: int = 1000            # 10 s at 100 Hz
    stem_channels: int = 32
    stem_kernel: int = 7
    stem_stride: int = 2
    block_widths: tuple = (32, 64, 128, 256)
    block_strides: tuple = (1, 2, 2, 2)
    block_kernel: int = 3
    embed_dim: int = 256

    def __post_init__(self):
        if len(self.block_widths) != len(self.block_strides):
            raise ValueError("block_widths and block_strides must have equal length")
        for name in ("leads", "samples", "stem_channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @staticmethod
    def compact() -> "EcgEncoderConfig":
        """Small preset for fast desk runs (ablations, acceptance sweeps)."""
        return EcgEncoderConfig(stem_channels=8, stem_stride=4,
                                block_widths=(8, 16, 32, 64),
                                block_strides=(1, 2, 2, 2))


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = MAX_TOKENS
    embed_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 64
    out_dim: int = 256

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (token 0 is padding)")
        if not 1 <= self.max_len <= MAX_TOKENS:
            raise ValueError(f"max_len must lie in [1, {MAX_TOKENS}]")


@dataclass
class TokenSequence:
    """Integer token ids; id 0 is padding and is ignored by pooling."""

    ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError("token ids must be a 1-D sequence")
        if len(self.ids) > MAX_TOKENS:
            raise ValueError(f"sequence longer than {MAX_TOKENS} tokens")
        if np.any(self.ids < 0) or np.any(self.ids >= self.vocab_size):
            raise ValueError("token id out of vocabulary range")

    @property
    def length(self) -> int:
        return int(np.sum(self.ids != PAD_TOKEN))


class EcgEncoder:
    """Conv stem -> residual blocks -> global average pool -> heads."""

    def __init__(self, cfg: EcgEncoderConfig, name: str = "ecg"):
        self.cfg = cfg
        self.name = name
        pad = cfg.stem_kernel // 2
        self.trunk = [Conv1d(f"{name}.stem", cfg.leads, cfg.stem_channels,
                             cfg.stem_kernel, cfg.stem_stride, pad), Relu()]
        c_in = cfg.stem_channels
        for i, (width, stride) in enumerate(zip(cfg.block_widths, cfg.block_strides)):
            self.trunk.append(ResidualBlock1d(f"{name}.block{i}", c_in, width,
                                              cfg.block_kernel, stride))
            c_in = width
        self.trunk.append(GlobalAvgPool())
        self.heads = ProjectionHeads(f"{name}.heads", c_in, cfg.embed_dim)

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        for op in self.trunk:
            op.init_into(params, rng)
        self.heads.init_into(params, rng)

    def trunk_param_count(self, params: ParamStore) -> int:
        total = params.num_values(f"{self.name}.")
        return total - params.num_values(f"{self.name}.heads.")

    def forward(self, windows: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
        """windows: (B, leads, samples) -> (mu (B, D), log_var (B, D))."""
        if windows.data.ndim != 3 or windows.shape[1:] != (self.cfg.leads, self.cfg.samples):
            raise ShapeError(
                f"{self.name}: expected (B, {self.cfg.leads}, {self.cfg.samples}),"
                f" got {windows.shape}"
            )
        feats = forward_graph(self.trunk, windows, params)
        return self.heads(feats, params)

    def encode(self, windows: np.ndarray, params: ParamStore) -> list[ProbEmbedding]:
        """Frozen-parameter inference to value-level embeddings."""
        mu, lv = self.forward(Tensor(windows), params)
        return [ProbEmbedding(m, v) for m, v in zip(mu.data, lv.data)]


class TextEncoder:
    """Token embedding table -> mean pool over non-pad -> 2-layer MLP -> heads."""

    def __init__(self, cfg: TextEncoderConfig, name: str = "txt"):
        self.cfg = cfg
        self.name = name
        self.mlp = [Dense(f"{name}.fc1", cfg.embed_dim, cfg.hidden_dim), Relu(),
                    Dense(f"{name}.fc2", cfg.hidden_dim, cfg.feature_dim)]
        self.heads = ProjectionHeads(f"{name}.heads", cfg.feature_dim, cfg.out_dim)

    def init_into(self, params: ParamStore, rng: np.random.Generator) -> None:
        params.add(f"{self.name}.emb",
                   rng.normal(0.0, 1.0, (self.cfg.vocab_size, self.cfg.embed_dim)))
        for op in self.mlp:
            op.init_into(params, rng)
        self.heads.init_into(params, rng)

    def forward(self, ids: np.ndarray, params: ParamStore) -> tuple[Tensor, Tensor]:
        """ids: (B, L) int array, 0 = pad -> (mu (B, D), log_var (B, D))."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"{self.name}: expected (B, L) token ids, got {ids.shape}")
        mask = (ids != PAD_TOKEN).astype(np.float64)
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError(f"{self.name}: empty token sequence in batch")
        from .autodiff import embedding
        emb = embedding(params[f"{self.name}.emb"], ids)        # (B, L, E)
        pooled = (emb * Tensor(mask[:, :, None])).sum(axis=1) * Tensor(1.0 / counts[:, None])
        feats = forward_graph(self.mlp, pooled, params)
        return self.heads(feats, params)

    def encode(self, ids: np.ndarray, params: ParamStore) -> list[ProbEmbedding]:
        mu, lv = self.forward(ids, params)
        return [ProbEmbedding(m, v) for m, v in zip(mu.data, lv.data)]


def pad_token_batch(seqs: list[np.ndarray], max_len: int | None = None) -> np.ndarray:
    """Right-pad variable-length id sequences with the pad token."""
    if not seqs:
        raise ValueError("empty token batch")
    width = max_len or max(len(s) for s in seqs)
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
