"""Adaptive softmax, the full-softmax baseline, and input/output weight tying.

Output parameters are stored in the same orientation as their input-side
counterparts (one row per word; projections as [band_dim, d]) and used
transposed, so tying is plain object sharing:

* ``head_words``      [|V_1|, d]     logits  h @ head_words.T
* ``cluster_logits``  [n - 1, d]     one logit per tail band, never shared
* ``tail_projections[i]`` [d_i, d]   h @ P.T, shared with input ``projections[i]``
* ``tail_tables[i]``  [|V_i|, d_i]   shared with input ``tables[i]``
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .inputs import AdaptiveInputEmbedding, FixedEmbedding
from .nn import Linear, Module, init_normal
from .tensor import Tensor
from .vocab import ClusterPartition


def _check_targets(targets, vocab_size: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= vocab_size):
        raise IndexError(f"target id outside vocabulary of size {vocab_size}")
    return t


class AdaptiveSoftmax(Module):
    """Head over frequent words plus one logit per tail cluster; each tail
    cluster is a softmax over ``(h P_i^T) E_i^T`` with reduced width d_i.

    ``head_projection`` selects the rejected variant with a [d, d] projection
    in front of the head: ``"none"`` (default), ``"private"`` or ``"tied"``
    (filled in by :func:`tie`).
    """

    def __init__(
        self,
        partition: ClusterPartition,
        rng: np.random.Generator,
        tail_dropout: float = 0.0,
        head_projection: str = "none",
        dtype=np.float32,
    ):
        if not 0.0 <= tail_dropout < 1.0:
            raise ValueError(f"tail dropout must be in [0, 1), got {tail_dropout}")
        if head_projection not in ("none", "private", "tied"):
            raise ValueError(f"unknown head projection mode {head_projection!r}")
        self.partition = partition
        self.tail_dropout = tail_dropout
        d = partition.head_dim
        n = partition.n_bands
        self.head_words = init_normal(rng, (partition.band_sizes[0], d), d**-0.5, dtype)
        self.cluster_logits = init_normal(rng, (n - 1, d), d**-0.5, dtype) if n > 1 else None
        bound = math.sqrt(3.0 / d)
        self.tail_projections = [
            T.parameter(rng.uniform(-bound, bound, size=(dim, d)), dtype=dtype) for dim in partition.band_dims[1:]
        ]
        self.tail_tables = [
            init_normal(rng, (size, dim), dim**-0.5, dtype)
            for size, dim in zip(partition.band_sizes[1:], partition.band_dims[1:])
        ]
        self.head_projection_mode = head_projection
        self.head_projection = (
            T.parameter(rng.uniform(-bound, bound, size=(d, d)), dtype=dtype) if head_projection != "none" else None
        )

    @property
    def vocab_size(self) -> int:
        return self.partition.vocab_size

    def _head_lsm(self, h: Tensor) -> Tensor:
        x = h if self.head_projection is None else T.matmul(h, T.transpose(self.head_projection))
        logits = T.matmul(x, T.transpose(self.head_words))
        if self.cluster_logits is not None:
            logits = T.concat([logits, T.matmul(x, T.transpose(self.cluster_logits))], axis=1)
        return T.log_softmax(logits, axis=-1)

    def _tail_lsm(self, h: Tensor, i: int) -> Tensor:
        proj = T.matmul(h, T.transpose(self.tail_projections[i]))
        proj = self.apply_tail_dropout(proj)
        return T.log_softmax(T.matmul(proj, T.transpose(self.tail_tables[i])), axis=-1)

    def apply_tail_dropout(self, projected: Tensor) -> Tensor:
        """Dropout on tail projection outputs; the head path never sees it."""
        return T.dropout(projected, self.tail_dropout, self.training, self._rng)

    def log_probs(self, h: Tensor) -> Tensor:
        """Full [N, |V|] log-probabilities (all clusters evaluated)."""
        h = T.reshape(h, (-1, self.partition.head_dim))
        head = self._head_lsm(h)
        n_head = self.partition.band_sizes[0]
        parts = [T.slice_axis(head, 1, 0, n_head)]
        for i in range(len(self.tail_tables)):
            prior = T.slice_axis(head, 1, n_head + i, n_head + i + 1)
            parts.append(T.add(self._tail_lsm(h, i), prior))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def token_nll(self, h: Tensor, targets) -> Tensor:
        """Per-token negative log-likelihood [N]; only clusters holding a target are evaluated."""
        h = T.reshape(h, (-1, self.partition.head_dim))
        t = _check_targets(targets, self.vocab_size)
        if t.size != h.shape[0]:
            raise ValueError(f"{h.shape[0]} hidden rows but {t.size} targets")
        bands = self.partition.band_of(t)
        n_head = self.partition.band_sizes[0]
        head_target = np.where(bands == 0, t, n_head + bands - 1)
        logp = T.gather(self._head_lsm(h), head_target)
        parts = [Tensor(np.zeros(1, dtype=h.dtype))]
        where = np.zeros(t.size, dtype=np.int64)
        filled = 1
        for i in range(len(self.tail_tables)):
            rows = np.flatnonzero(bands == i + 1)
            if rows.size == 0:
                continue
            local = t[rows] - self.partition.band_range(i + 1)[0]
            parts.append(T.gather(self._tail_lsm(T.index_select(h, rows), i), local))
            where[rows] = np.arange(filled, filled + rows.size)
            filled += rows.size
        if len(parts) > 1:
            logp = T.add(logp, T.index_select(T.concat(parts, axis=0), where))
        return T.scale(logp, -1.0)

    def nll_loss(self, h: Tensor, targets, reduction: str = "mean") -> Tensor:
        nll = self.token_nll(h, targets)
        total = T.tsum(nll)
        return total if reduction == "sum" else T.scale(total, 1.0 / max(nll.size, 1))


class FullSoftmax(Module):
    """Softmax over the whole vocabulary with a [V, dim] weight, preceded by a
    bias-free adapter when the hidden size differs from ``dim``."""

    def __init__(self, vocab_size: int, dim: int, model_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.vocab_size = vocab_size
        self.model_dim = model_dim
        self.adapter = Linear(model_dim, dim, bias=False, rng=rng, dtype=dtype) if dim != model_dim else None
        self.weight = init_normal(rng, (vocab_size, dim), dim**-0.5, dtype)

    def log_probs(self, h: Tensor) -> Tensor:
        h = T.reshape(h, (-1, self.model_dim))
        if self.adapter is not None:
            h = self.adapter(h)
        return T.log_softmax(T.matmul(h, T.transpose(self.weight)), axis=-1)

    def token_nll(self, h: Tensor, targets) -> Tensor:
        t = _check_targets(targets, self.vocab_size)
        return T.scale(T.gather(self.log_probs(h), t), -1.0)

    def nll_loss(self, h: Tensor, targets, reduction: str = "mean") -> Tensor:
        nll = self.token_nll(h, targets)
        total = T.tsum(nll)
        return total if reduction == "sum" else T.scale(total, 1.0 / max(nll.size, 1))


def full_softmax_loss(layer: FullSoftmax, h: Tensor, targets) -> Tensor:
    return layer.nll_loss(h, targets)


@dataclass(frozen=True)
class TyingConfig:
    tie_embeddings: bool = False
    tie_projections: bool = False

    def __post_init__(self):
        if self.tie_projections and not self.tie_embeddings:
            raise ValueError("tying projections requires tying embeddings")


def tie(input_layer, output_layer, config: TyingConfig) -> dict[str, str]:
    """Make the output layer reuse the input layer's parameter objects.

    Returns the sharing registry ``{output attribute: input attribute}``.
    The input head projection stays private unless the output was built with
    ``head_projection="tied"``.
    """
    shared: dict[str, str] = {}
    if isinstance(output_layer, FullSoftmax):
        if config.tie_projections:
            raise ValueError("a full softmax has no projections to tie")
        if config.tie_embeddings:
            if not isinstance(input_layer, FixedEmbedding):
                raise ValueError("a full softmax can only be tied to a fixed embedding table")
            if input_layer.table.shape != output_layer.weight.shape:
                raise ValueError(
                    f"table shapes differ: input {input_layer.table.shape} vs output {output_layer.weight.shape}"
                )
            output_layer.weight = input_layer.table
            shared["weight"] = "table"
        return shared

    if not isinstance(input_layer, AdaptiveInputEmbedding):
        if config.tie_embeddings:
            raise ValueError("an adaptive softmax can only be tied to adaptive input embeddings")
        return shared
    a, b = input_layer.partition, output_layer.partition
    if a != b:
        diff = [
            f"{name}: {getattr(a, name)} != {getattr(b, name)}"
            for name in ("band_sizes", "head_dim", "factor")
            if getattr(a, name) != getattr(b, name)
        ]
        raise ValueError("partition mismatch: " + "; ".join(diff))
    if config.tie_embeddings:
        output_layer.head_words = input_layer.tables[0]
        shared["head_words"] = "tables.0"
        for i in range(len(output_layer.tail_tables)):
            output_layer.tail_tables[i] = input_layer.tables[i + 1]
            shared[f"tail_tables.{i}"] = f"tables.{i + 1}"
    if config.tie_projections:
        for i in range(len(output_layer.tail_projections)):
            output_layer.tail_projections[i] = input_layer.projections[i + 1]
            shared[f"tail_projections.{i}"] = f"projections.{i + 1}"
    if output_layer.head_projection_mode == "tied":
        output_layer.head_projection = input_layer.projections[0]
        shared["head_projection"] = "projections.0"
    return shared
