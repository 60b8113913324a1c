"""Input representations: adaptive embeddings, fixed embeddings and a character CNN."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, init_normal, init_uniform_fan_in
from .tensor import Tensor
from .vocab import ClusterPartition

CHAR_PAD = 0
CHAR_UNK = 1
DEFAULT_CHAR_FILTERS = ((1, 128), (2, 256), (3, 384), (4, 512), (5, 512), (6, 512), (7, 512))
_MASK_PENALTY = 1e4  # tanh features live in [-1, 1]


def _check_ids(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise IndexError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids


class AdaptiveInputEmbedding(Module):
    """Per-band embedding tables of width d/k^i, each projected to d.

    The head band is projected as well. Outputs keep the input order.
    """

    def __init__(self, partition: ClusterPartition, rng: np.random.Generator, dtype=np.float32):
        self.partition = partition
        self.tables = [
            init_normal(rng, (size, dim), dim**-0.5, dtype)
            for size, dim in zip(partition.band_sizes, partition.band_dims)
        ]
        self.projections = [
            init_uniform_fan_in(rng, (dim, partition.head_dim), dtype) for dim in partition.band_dims
        ]

    @property
    def out_dim(self) -> int:
        return self.partition.head_dim

    def forward(self, ids) -> Tensor:
        ids = _check_ids(ids, self.partition.vocab_size)
        flat = ids.reshape(-1)
        bands = self.partition.band_of(flat)
        parts, order = [], []
        for i in range(self.partition.n_bands):
            where = np.flatnonzero(bands == i)
            if where.size == 0:
                continue
            local = flat[where] - self.partition.band_range(i)[0]
            parts.append(T.matmul(T.embedding_lookup(self.tables[i], local), self.projections[i]))
            order.append(where)
        out = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        perm = np.concatenate(order)
        if not np.array_equal(perm, np.arange(perm.size)):
            out = T.index_select(out, np.argsort(perm, kind="stable"))
        return T.reshape(out, ids.shape + (self.out_dim,))


class FixedEmbedding(Module):
    """A single [V x d_in] table, followed by a bias-free adapter when d_in != model_dim."""

    def __init__(self, vocab_size: int, dim: int, model_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.vocab_size = vocab_size
        self.table = init_normal(rng, (vocab_size, dim), dim**-0.5, dtype)
        self.adapter = Linear(dim, model_dim, bias=False, rng=rng, dtype=dtype) if dim != model_dim else None
        self.out_dim = model_dim

    def forward(self, ids) -> Tensor:
        ids = _check_ids(ids, self.vocab_size)
        x = T.embedding_lookup(self.table, ids)
        return x if self.adapter is None else self.adapter(x)


class Highway(Module):
    """``y = t * relu(x W_h + b_h) + (1 - t) * x`` with ``t = sigmoid(x W_t + b_t)``."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, carry_bias: float = -2.0):
        self.transform = Linear(dim, dim, bias=True, rng=rng, dtype=dtype)
        self.gate = Linear(dim, dim, bias=True, rng=rng, dtype=dtype)
        self.gate.bias.data[:] = carry_bias

    def forward(self, x: Tensor) -> Tensor:
        t = T.sigmoid(self.gate(x))
        h = T.relu(self.transform(x))
        return T.add(x, T.mul(t, T.sub(h, x)))


class CharVocab:
    """Character inventory; id 0 pads, id 1 stands for unseen characters."""

    def __init__(self, chars: Sequence[str]):
        self.chars = ["<pad>", "<unkc>"] + sorted(set(chars))
        self._index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "CharVocab":
        return cls({c for w in words for c in w})

    def encode(self, words: Sequence[str], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        lengths = np.array([len(w) for w in words], dtype=np.int64)
        if (lengths == 0).any():
            raise ValueError("empty word given to the character encoder")
        width = max(int(lengths.max()), width or 0)
        ids = np.full((len(words), width), CHAR_PAD, dtype=np.int64)
        for r, w in enumerate(words):
            ids[r, : len(w)] = [self._index.get(c, CHAR_UNK) for c in w]
        return ids, lengths


class CharCnnEncoder(Module):
    """Char embeddings -> width-w convolutions -> tanh -> masked max-pool ->
    highway layer(s) -> bias-free projection.

    Positions past a word's end read zero vectors, and a width-w filter on a
    word of length n pools over ``max(n - w + 1, 1)`` positions, so trailing
    padding never changes the result.
    """

    def __init__(
        self,
        n_chars: int,
        out_dim: int,
        rng: np.random.Generator,
        char_dim: int = 128,
        filters: Sequence[tuple[int, int]] = DEFAULT_CHAR_FILTERS,
        highway_layers: int = 1,
        dtype=np.float32,
    ):
        self.char_dim = char_dim
        self.widths = [w for w, _ in filters]
        self.char_table = init_normal(rng, (n_chars, char_dim), char_dim**-0.5, dtype)
        self.conv_weights = [init_uniform_fan_in(rng, (w * char_dim, n), dtype) for w, n in filters]
        self.conv_biases = [T.parameter(np.zeros(n), dtype=dtype) for _, n in filters]
        self.n_features = sum(n for _, n in filters)
        self.highways = [Highway(self.n_features, rng, dtype) for _ in range(highway_layers)]
        self.projection = Linear(self.n_features, out_dim, bias=False, rng=rng, dtype=dtype)
        self.out_dim = out_dim

    def forward(self, char_ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        char_ids = np.asarray(char_ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if (lengths < 1).any():
            raise ValueError("character CNN needs words of length >= 1")
        n_words, width = char_ids.shape
        dtype = self.char_table.dtype
        feats = []
        for w, weight, bias in zip(self.widths, self.conv_weights, self.conv_biases):
            n_pos = max(width - w + 1, 1)
            padded = np.full((n_words, n_pos + w - 1), CHAR_PAD, dtype=np.int64)
            padded[:, :width] = char_ids
            window = padded[:, np.arange(n_pos)[:, None] + np.arange(w)[None, :]]  # [W, P, w]
            emb = T.embedding_lookup(self.char_table, window)
            emb = T.mul(emb, (window != CHAR_PAD)[..., None].astype(dtype))
            emb = T.reshape(emb, (n_words, n_pos, w * self.char_dim))
            conv = T.tanh(T.add(T.matmul(emb, weight), bias))
            valid = np.arange(n_pos)[None, :] < np.maximum(lengths - w + 1, 1)[:, None]
            penalty = np.where(valid, 0.0, -_MASK_PENALTY).astype(dtype)[..., None]
            feats.append(T.max_over_axis(T.add(conv, penalty), axis=1))
        x = T.concat(feats, axis=1)
        for hw in self.highways:
            x = hw(x)
        return self.projection(x)


class CharCnnInput(Module):
    """Word-id front end for :class:`CharCnnEncoder`: each distinct id in a
    batch is encoded once from the characters of its vocabulary string.
    """

    def __init__(self, words: Sequence[str], out_dim: int, rng: np.random.Generator, **encoder_kwargs):
        self.words = list(words)
        self.chars = CharVocab.from_words(words)
        self._word_chars, self._word_lengths = self.chars.encode(list(words))
        self.encoder = CharCnnEncoder(len(self.chars), out_dim, rng, **encoder_kwargs)
        self.out_dim = out_dim

    def forward(self, ids) -> Tensor:
        ids = _check_ids(ids, len(self._word_lengths))
        uniq, inverse = np.unique(ids.reshape(-1), return_inverse=True)
        lengths = self._word_lengths[uniq]
        chars = self._word_chars[uniq][:, : int(lengths.max())]
        enc = self.encoder(chars, lengths)
        return T.reshape(T.index_select(enc, inverse.reshape(-1)), ids.shape + (self.out_dim,))


def highway(x: np.ndarray, w_h: np.ndarray, b_h: np.ndarray, w_t: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """Plain-array highway transform, used as a reference."""
    t = 1.0 / (1.0 + np.exp(-(x @ w_t + b_t)))
    return t * np.maximum(x @ w_h + b_h, 0.0) + (1.0 - t) * x

