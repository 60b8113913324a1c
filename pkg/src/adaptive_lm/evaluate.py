"""Perplexity evaluation, word-level scoring of sub-word models and frequency-binned losses."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Block, make_batches

BIN_BOUNDS = (10, 100, 1_000, 10_000, 100_000, 1_000_000, math.inf)
NO_PREDECESSOR = -1


def bin_label(bound: float) -> str:
    if math.isinf(bound):
        return "1M+"
    for div, suffix in ((1_000_000, "M"), (1_000, "K")):
        if bound >= div and bound % div == 0:
            return f"{int(bound // div)}{suffix}"
    return str(int(bound))


@dataclass
class EvalReport:
    """Per-token losses (natural log) in stream order.

    ``prev_ids`` holds the token fed to the model before each target, or
    ``NO_PREDECESSOR`` for the first token of the stream.
    """

    token_ids: np.ndarray
    prev_ids: np.ndarray
    losses: np.ndarray
    positions: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.losses.size)

    @property
    def total_nll(self) -> float:
        return math.fsum(self.losses.tolist())

    @property
    def mean_nll(self) -> float:
        return self.total_nll / self.n_tokens if self.n_tokens else math.nan

    @property
    def perplexity(self) -> float:
        return math.exp(self.mean_nll)

    @classmethod
    def merge(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        """Combine reports computed on disjoint blocks."""
        cat = [np.concatenate([getattr(r, f) for r in reports]) for f in ("token_ids", "prev_ids", "losses", "positions")]
        order = np.argsort(cat[3], kind="stable")
        if np.any(np.diff(cat[3][order]) == 0):
            raise ValueError("reports overlap: a position was scored twice")
        return cls(*(a[order] for a in cat))

    def save_losses(self, path) -> None:
        """Binary sidecar: little-endian records (position i8, token i4, prev i4, loss f8)."""
        rec = np.zeros(self.n_tokens, dtype=[("pos", "<i8"), ("id", "<i4"), ("prev", "<i4"), ("loss", "<f8")])
        rec["pos"], rec["id"], rec["prev"], rec["loss"] = self.positions, self.token_ids, self.prev_ids, self.losses
        Path(path).write_bytes(rec.tobytes())

    @classmethod
    def load_losses(cls, path) -> "EvalReport":
        rec = np.frombuffer(
            Path(path).read_bytes(), dtype=[("pos", "<i8"), ("id", "<i4"), ("prev", "<i4"), ("loss", "<f8")]
        )
        return cls(rec["id"].astype(np.int64), rec["prev"].astype(np.int64), rec["loss"].astype(np.float64), rec["pos"].astype(np.int64))


def evaluate(model, blocks: Sequence[Block], token_budget: int | None = None) -> EvalReport:
    """Score every flagged position of ``blocks``.

    Blocks are grouped into batches under ``token_budget`` (one block per
    batch when it is None). The model must expose
    ``batch_nll(batch, scored_only=True) -> (nll tensor, flat row indices)``.
    """
    if hasattr(model, "eval"):
        model.eval()
    if not blocks:
        return EvalReport(*(np.zeros(0, dtype=t) for t in (np.int64, np.int64, np.float64, np.int64)))
    budget = token_budget if token_budget is not None else max(len(b) for b in blocks)
    if token_budget is None:
        batches = [make_batches([b], len(b))[0] for b in blocks]
    else:
        batches = make_batches(blocks, budget)
    parts = []
    with T.no_grad():
        for batch in batches:
            nll, rows = model.batch_nll(batch, scored_only=True)
            flat = lambda a: a.reshape(-1)[rows]  # noqa: E731
            pos = flat(batch.positions)
            prev = np.where(pos == 0, NO_PREDECESSOR, flat(batch.inputs))
            parts.append(EvalReport(flat(batch.targets), prev, np.asarray(nll.data, dtype=np.float64), pos))
    return EvalReport.merge(parts)


# -- sub-word models ----------------------------------------------------------


def word_level(report: EvalReport, word_ends: np.ndarray) -> EvalReport:
    """Collapse sub-word losses into word losses.

    ``word_ends[p]`` is True when the unit at stream position ``p`` finishes a
    word. Every scored word must be scored completely.
    """
    word_ends = np.asarray(word_ends, dtype=bool)
    pos = report.positions
    if pos.size and pos.max() >= word_ends.size:
        raise ValueError(f"boundary map covers {word_ends.size} units but position {pos.max()} was scored")
    if pos.size:
        if not np.array_equal(pos, np.arange(pos[0], pos[0] + pos.size)):
            raise ValueError("word-level scoring needs a contiguous run of scored units")
        if pos[0] > 0 and not word_ends[pos[0] - 1]:
            raise ValueError("scored units start in the middle of a word")
        if not word_ends[pos[-1]]:
            raise ValueError("scored units end in the middle of a word")
    ends = np.flatnonzero(word_ends[pos])
    starts = np.concatenate(([0], ends[:-1] + 1))
    sums = np.array([math.fsum(report.losses[a : b + 1].tolist()) for a, b in zip(starts, ends)])
    return EvalReport(
        report.token_ids[ends],
        np.full(ends.size, NO_PREDECESSOR, dtype=np.int64),
        sums,
        np.arange(ends.size, dtype=np.int64),
    )


def word_ppl_from_subwords(model, blocks: Sequence[Block], word_ends: np.ndarray, token_budget: int | None = None) -> EvalReport:
    return word_level(evaluate(model, blocks, token_budget), word_ends)


# -- frequency bins -------------------------------------------------------------


@dataclass
class BinnedLoss:
    mode: str
    bounds: tuple
    types: list[int]
    token_counts: list[int]
    loss_sums: list[float]
    excluded: int = 0
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [bin_label(b) for b in self.bounds]

    @property
    def mean_losses(self) -> list[float]:
        return [s / n if n else math.nan for s, n in zip(self.loss_sums, self.token_counts)]

    @property
    def n_tokens(self) -> int:
        return sum(self.token_counts)

    def rows(self) -> list[tuple]:
        return list(zip(self.labels, self.types, self.token_counts, self.mean_losses))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_bound", "types", "token_count", "mean_loss"])
            for label, types, count, mean in self.rows():
                w.writerow([label, types, count, "" if math.isnan(mean) else f"{mean:.6f}"])


def bin_index(counts, bounds=BIN_BOUNDS) -> np.ndarray:
    """Index of the first bin whose upper bound is >= the count."""
    finite = np.asarray([b for b in bounds if not math.isinf(b)], dtype=np.float64)
    return np.searchsorted(finite, np.asarray(counts, dtype=np.float64), side="left")


def bin_loss(report: EvalReport, frequencies: np.ndarray, mode: str = "current", bounds=BIN_BOUNDS) -> BinnedLoss:
    """Aggregate token losses by the frequency of the current or the previous word.

    In ``previous`` mode tokens without a predecessor are excluded and counted
    in ``excluded``.
    """
    if mode not in ("current", "previous"):
        raise ValueError(f"unknown binning mode {mode!r}")
    frequencies = np.asarray(frequencies)
    key = report.token_ids if mode == "current" else report.prev_ids
    keep = key != NO_PREDECESSOR
    key, losses = key[keep], report.losses[keep]
    bins = bin_index(frequencies[key], bounds)
    n = len(bounds)
    types = [int(np.unique(key[bins == i]).size) for i in range(n)]
    counts = [int((bins == i).sum()) for i in range(n)]
    sums = [math.fsum(losses[bins == i].tolist()) for i in range(n)]
    return BinnedLoss(mode, tuple(bounds), types, counts, sums, int((~keep).sum()))


def stream_frequencies(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.bincount(np.asarray(ids, dtype=np.int64), minlength=vocab_size)
