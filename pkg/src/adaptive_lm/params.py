"""Closed-form parameter counts for a configuration, without building weights."""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig


def block_parameters(e: int, e_ff: int) -> int:
    """Attention (with biases) + FFN + two layer norms."""
    return 4 * e * e + 4 * e + 2 * e * e_ff + e_ff + e + 4 * e


def decoder_parameters(n_blocks: int, e: int, e_ff: int) -> int:
    return n_blocks * block_parameters(e, e_ff) + 2 * e


@dataclass(frozen=True)
class ParamBreakdown:
    """Counts per component; ``shared`` is subtracted once so tied storage counts once."""

    input: int
    output: int
    decoder: int
    shared: int

    @property
    def total(self) -> int:
        return self.input + self.output + self.decoder - self.shared

    @property
    def embedding_total(self) -> int:
        """Input plus output layers, shared storage counted once."""
        return self.input + self.output - self.shared

    def reduction_vs(self, baseline: "ParamBreakdown") -> float:
        """Fractional saving of input+output parameters relative to ``baseline``."""
        return 1.0 - self.embedding_total / baseline.embedding_total

    def format(self) -> str:
        rows = [
            ("input layer", self.input),
            ("output layer", self.output),
            ("decoder", self.decoder),
            ("shared (counted once)", -self.shared),
            ("total", self.total),
        ]
        return "".join(f"{name:<24}{n:>14,d}  ({n / 1e6:.1f}M)\n" for name, n in rows)


def _bands(cfg: RunConfig, vocab_size: int) -> tuple[list[int], list[int], int]:
    cuts = cfg.cutoffs(vocab_size)
    edges = [0, *cuts, vocab_size]
    sizes = [b - a for a, b in zip(edges, edges[1:])]
    d = cfg["model.adaptive_dim"]
    k = cfg["model.adaptive_factor"]
    return sizes, [d // k**i for i in range(len(sizes))], d


def count_parameters(cfg: RunConfig, vocab_size: int | None = None, char_inventory: int | None = None) -> ParamBreakdown:
    """Exact parameter count of the model ``cfg`` describes.

    ``char_inventory`` (including the pad and unknown symbols) only matters for
    character-CNN inputs and defaults to ``model.char_inventory``.
    """
    v = vocab_size or cfg["model.vocab_size"]
    if not v:
        raise ValueError("vocabulary size unknown: set model.vocab_size or pass vocab_size")
    cfg.validate(v)
    e = cfg["model.model_dim"]
    uses_bands = "adaptive" in (cfg["model.input"], cfg["model.output"])
    sizes, dims, d = _bands(cfg, v) if uses_bands else ([], [], 0)
    adapter = d * e if d != e else 0

    kind = cfg["model.input"]
    if kind == "adaptive":
        n_in = sum(s * di for s, di in zip(sizes, dims)) + sum(di * d for di in dims) + adapter
    elif kind == "embedding":
        di = cfg["model.input_dim"]
        n_in = v * di + (di * e if di != e else 0)
    else:
        chars = char_inventory if char_inventory is not None else cfg["model.char_inventory"]
        c = cfg["model.char_dim"]
        filters = cfg["model.char_filters"]
        feats = sum(n for _, n in filters)
        n_in = chars * c + sum(w * c * n + n for w, n in filters)
        n_in += cfg["model.highway_layers"] * 2 * (feats * feats + feats) + feats * e

    shared = 0
    if cfg["model.output"] == "adaptive":
        n_out = sizes[0] * d + (len(sizes) - 1) * d
        n_out += sum(di * d + s * di for s, di in zip(sizes[1:], dims[1:])) + adapter
        if cfg["model.output_head_projection"] != "none":
            n_out += d * d
        if cfg["model.tie_embeddings"]:
            shared += sum(s * di for s, di in zip(sizes, dims))
        if cfg["model.tie_projections"]:
            shared += sum(di * d for di in dims[1:])
        if cfg["model.output_head_projection"] == "tied":
            shared += d * d
    else:
        do = cfg["model.output_dim"]
        n_out = v * do + (e * do if do != e else 0)
        if cfg["model.tie_embeddings"]:
            shared += v * do

    n_dec = decoder_parameters(cfg["model.n_blocks"], e, cfg["model.ffn_dim"])
    return ParamBreakdown(n_in, n_out, n_dec, shared)


def model_breakdown(model) -> ParamBreakdown:
    """Enumerate a built model's parameter tensors (sharing-aware)."""

    def size(mod) -> int:
        return 0 if mod is None else sum(p.size for _, p in mod.named_parameters())

    n_in = size(model.input_layer) + size(model.input_adapter)
    n_out = size(model.output_layer) + size(model.output_adapter)
    ids_in = {id(p) for _, p in model.input_layer.named_parameters()}
    shared = sum(p.size for _, p in model.output_layer.named_parameters() if id(p) in ids_in)
    return ParamBreakdown(n_in, n_out, size(model.decoder), shared)
