"""Pre-norm decoder-only self-attention network."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    n_blocks: int = 16
    heads: int = 16
    model_dim: int = 1024
    ffn_dim: int = 4096
    dropout: float = 0.1
    attn_dropout: float = 0.1
    relu_dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even for sinusoidal positions")


def sinusoidal_positions(length: int, dim: int, offset: int = 0) -> np.ndarray:
    """Entry (p, 2i) = sin(p / 10000^(2i/dim)), entry (p, 2i+1) = cos(same angle)."""
    if dim % 2:
        raise ValueError("sinusoidal positions need an even dimension")
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    rate = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)[None, :]
    out = np.empty((length, dim))
    out[:, 0::2] = np.sin(pos * rate)
    out[:, 1::2] = np.cos(pos * rate)
    return out


def causal_mask(length: int, dtype) -> np.ndarray:
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, 1)] = -np.inf
    return mask


class CausalSelfAttention(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        e = cfg.model_dim
        self.heads = cfg.heads
        self.attn_dropout = cfg.attn_dropout
        self.query = Linear(e, e, bias=True, rng=rng, dtype=dtype)
        self.key = Linear(e, e, bias=True, rng=rng, dtype=dtype)
        self.value = Linear(e, e, bias=True, rng=rng, dtype=dtype)
        self.out = Linear(e, e, bias=True, rng=rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, t, e = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, e // self.heads)), (0, 2, 1, 3))

    def weights(self, x: Tensor) -> Tensor:
        """Attention probabilities [B, H, T, T]."""
        b, t, e = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(e // self.heads))
        return T.softmax(T.add(scores, Tensor(causal_mask(t, x.dtype))), axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        b, t, e = x.shape
        attn = T.dropout(self.weights(x), self.attn_dropout, self.training, self._rng)
        ctx = T.matmul(attn, self._split(self.value(x)))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, e))
        return self.out(ctx)


class FeedForward(Module):
    """relu(x W_1 + b_1) W_2 + b_2 with dropout after the activation."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(cfg.model_dim, cfg.ffn_dim, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Linear(cfg.ffn_dim, cfg.model_dim, bias=True, rng=rng, dtype=dtype)
        self.relu_dropout = cfg.relu_dropout

    def forward(self, x: Tensor) -> Tensor:
        h = T.dropout(T.relu(self.fc1(x)), self.relu_dropout, self.training, self._rng)
        return self.fc2(h)


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.attn_norm = LayerNorm(cfg.model_dim, dtype)
        self.attn = CausalSelfAttention(cfg, rng, dtype)
        self.ffn_norm = LayerNorm(cfg.model_dim, dtype)
        self.ffn = FeedForward(cfg, rng, dtype)
        self.dropout = cfg.dropout

    def forward(self, x: Tensor) -> Tensor:
        a = self.attn(self.attn_norm(x))
        x = T.add(x, T.dropout(a, self.dropout, self.training, self._rng))
        f = self.ffn(self.ffn_norm(x))
        return T.add(x, T.dropout(f, self.dropout, self.training, self._rng))


class Decoder(Module):
    """N pre-norm blocks followed by a final layer norm."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = cfg
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.n_blocks)]
        self.final_norm = LayerNorm(cfg.model_dim, dtype)

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is [B, T, e] and already carries the positional signal."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return T.reshape(x, x.shape[1:]) if squeeze else x


def decoder_forward(decoder: Decoder, input_embeddings: Tensor) -> Tensor:
    return decoder(input_embeddings)
