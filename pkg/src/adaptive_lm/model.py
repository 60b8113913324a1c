"""A complete language model assembled from a :class:`RunConfig`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .adaptive_softmax import AdaptiveSoftmax, FullSoftmax, TyingConfig, tie
from .config import RunConfig
from .data import Batch
from .decoder import Decoder, DecoderConfig, sinusoidal_positions
from .inputs import AdaptiveInputEmbedding, CharCnnInput, FixedEmbedding
from .nn import Linear, Module
from .tensor import Tensor
from .vocab import ClusterPartition


def decoder_config(cfg: RunConfig) -> DecoderConfig:
    return DecoderConfig(
        n_blocks=cfg["model.n_blocks"],
        heads=cfg["model.heads"],
        model_dim=cfg["model.model_dim"],
        ffn_dim=cfg["model.ffn_dim"],
        dropout=cfg["model.dropout"],
        attn_dropout=cfg["model.attn_dropout"],
        relu_dropout=cfg["model.relu_dropout"],
    )


def band_partition(cfg: RunConfig, vocab_size: int) -> ClusterPartition:
    return ClusterPartition.from_cutoffs(
        vocab_size, cfg.cutoffs(vocab_size), cfg["model.adaptive_dim"], cfg["model.adaptive_factor"]
    )


class LanguageModel(Module):
    """input layer -> (+ sinusoidal positions) -> decoder -> output layer.

    Adaptive layers whose width d differs from the model width e are joined
    to the decoder by bias-free adapters.
    """

    def __init__(self, cfg: RunConfig, vocab_size: int, words: Sequence[str] | None = None, seed: int | None = None):
        cfg.validate(vocab_size)
        self.config = cfg
        self.vocab_size = vocab_size
        seed = cfg["seed"] if seed is None else seed
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg["model.dtype"]).type
        e = cfg["model.model_dim"]
        d = cfg["model.adaptive_dim"]
        self.max_positions = cfg["model.max_positions"]
        partition = None
        if "adaptive" in (cfg["model.input"], cfg["model.output"]):
            partition = band_partition(cfg, vocab_size)

        kind = cfg["model.input"]
        self.input_adapter = None
        if kind == "adaptive":
            self.input_layer = AdaptiveInputEmbedding(partition, rng, dtype)
            if d != e:
                self.input_adapter = Linear(d, e, bias=False, rng=rng, dtype=dtype)
        elif kind == "embedding":
            self.input_layer = FixedEmbedding(vocab_size, cfg["model.input_dim"], e, rng, dtype)
        else:
            if words is None or len(words) != vocab_size:
                raise ValueError("a character CNN input needs the vocabulary strings")
            self.input_layer = CharCnnInput(
                words,
                e,
                rng,
                char_dim=cfg["model.char_dim"],
                filters=cfg["model.char_filters"],
                highway_layers=cfg["model.highway_layers"],
                dtype=dtype,
            )

        self.decoder = Decoder(decoder_config(cfg), rng, dtype)

        self.output_adapter = None
        if cfg["model.output"] == "adaptive":
            if d != e:
                self.output_adapter = Linear(e, d, bias=False, rng=rng, dtype=dtype)
            self.output_layer = AdaptiveSoftmax(
                partition, rng, cfg["model.tail_dropout"], cfg["model.output_head_projection"], dtype
            )
        else:
            self.output_layer = FullSoftmax(vocab_size, cfg["model.output_dim"], e, rng, dtype)

        self._shared = tie(
            self.input_layer,
            self.output_layer,
            TyingConfig(cfg["model.tie_embeddings"], cfg["model.tie_projections"]),
        )
        self.set_rng(np.random.default_rng([seed, 1]))

    @property
    def dtype(self):
        return self.decoder.final_norm.gain.dtype

    def hidden(self, inputs) -> Tensor:
        """Decoder states [B, L, e] for input ids [B, L]."""
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim == 1:
            inputs = inputs[None, :]
        length = inputs.shape[1]
        if length > self.max_positions:
            raise ValueError(f"sequence of {length} tokens exceeds model.max_positions {self.max_positions}")
        x = self.input_layer(inputs)
        if self.input_adapter is not None:
            x = self.input_adapter(x)
        pos = sinusoidal_positions(length, x.shape[-1]).astype(x.dtype)
        return self.decoder(T.add(x, Tensor(pos)))

    forward = hidden

    def token_nll(self, hidden: Tensor, targets, rows=None) -> Tensor:
        """Per-token nll for the selected flattened positions ``rows``."""
        h = T.reshape(hidden, (-1, hidden.shape[-1]))
        t = np.asarray(targets, dtype=np.int64).reshape(-1)
        if rows is not None:
            rows = np.asarray(rows, dtype=np.int64)
            if rows.size != h.shape[0] or not np.array_equal(rows, np.arange(h.shape[0])):
                h = T.index_select(h, rows)
            t = t[rows]
        if self.output_adapter is not None:
            h = self.output_adapter(h)
        return self.output_layer.token_nll(h, t)

    def batch_nll(self, batch: Batch, scored_only: bool = False) -> tuple[Tensor, np.ndarray]:
        """Per-token nll over real (or scored) positions and the flat row indices used."""
        keep = batch.score if scored_only else batch.mask
        rows = np.flatnonzero(keep.reshape(-1))
        return self.token_nll(self.hidden(batch.inputs), batch.targets, rows), rows

    def loss(self, batch: Batch, reduction: str = "sum") -> Tensor:
        nll, _ = self.batch_nll(batch)
        total = T.tsum(nll)
        return total if reduction == "sum" else T.scale(total, 1.0 / max(nll.size, 1))

    def log_probs(self, inputs) -> np.ndarray:
        """Full next-token log-probabilities [B, L, V] (evaluation helper)."""
        with T.no_grad():
            h = self.hidden(inputs)
            b, l, e = h.shape
            flat = T.reshape(h, (-1, e))
            if self.output_adapter is not None:
                flat = self.output_adapter(flat)
            return self.output_layer.log_probs(flat).data.reshape(b, l, -1)


def build_model(cfg: RunConfig, vocab_size: int, words: Sequence[str] | None = None, seed: int | None = None):
    return LanguageModel(cfg, vocab_size, words, seed)
