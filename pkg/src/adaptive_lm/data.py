"""Block construction and token-budget batching."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

TRAIN_CONTIGUOUS = "train_contiguous"
EVAL_SENTENCE_ALIGNED = "eval_sentence_aligned"


@dataclass
class Block:
    """A span of the token stream.

    ``inputs[t]`` is the token preceding ``targets[t]`` in the stream (the
    end-of-sentence id stands in before the first token). ``score[t]`` is
    False for context-only positions; ``positions`` are absolute stream
    offsets of the targets.
    """

    inputs: np.ndarray
    targets: np.ndarray
    score: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def n_scored(self) -> int:
        return int(self.score.sum())


@dataclass
class Batch:
    """Examples right-padded to a common length; ``mask`` marks real tokens."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    score: np.ndarray
    positions: np.ndarray
    indices: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())

    @property
    def n_scored(self) -> int:
        return int(self.score.sum())

    @property
    def padded_size(self) -> int:
        return int(self.inputs.size)


def _shifted(stream: np.ndarray, eos_id: int) -> np.ndarray:
    prev = np.empty_like(stream)
    prev[0] = eos_id
    prev[1:] = stream[:-1]
    return prev


def make_blocks(
    sentences: Sequence[np.ndarray],
    block_size: int,
    mode: str = TRAIN_CONTIGUOUS,
    context_size: int = 0,
    eos_id: int = 0,
    keep_partial: bool = False,
) -> list[Block]:
    """Cut a corpus (list of sentence id arrays) into blocks.

    ``train_contiguous`` chops the concatenated stream into back-to-back spans
    of ``block_size`` (a trailing partial span is dropped unless
    ``keep_partial``). ``eval_sentence_aligned`` packs complete sentences so
    that at most ``block_size - context_size`` tokens are scored per block,
    preceded by up to ``context_size`` tokens of complete earlier sentences
    that are fed to the model but not scored. Every token is scored exactly
    once.
    """
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    sentences = [np.asarray(s, dtype=np.int64) for s in sentences if len(s)]
    if not sentences:
        return []
    stream = np.concatenate(sentences)
    prev = _shifted(stream, eos_id)

    def block(lo: int, score_from: int, hi: int) -> Block:
        pos = np.arange(lo, hi)
        return Block(prev[lo:hi].copy(), stream[lo:hi].copy(), pos >= score_from, pos)

    if mode == TRAIN_CONTIGUOUS:
        out = [block(s, s, s + block_size) for s in range(0, len(stream) - block_size + 1, block_size)]
        tail = len(stream) % block_size
        if keep_partial and tail:
            out.append(block(len(stream) - tail, len(stream) - tail, len(stream)))
        return out

    if mode != EVAL_SENTENCE_ALIGNED:
        raise ValueError(f"unknown block mode {mode!r}")
    if not 0 <= context_size < block_size:
        raise ValueError(f"context_size {context_size} must be in [0, block_size {block_size})")
    budget = block_size - context_size

    # sentence spans, with over-long sentences hard-split at the scoring budget
    spans: list[tuple[int, int]] = []
    offset = 0
    too_long = 0
    for s in sentences:
        n = len(s)
        too_long += n > budget
        for a in range(0, n, budget):
            spans.append((offset + a, offset + min(a + budget, n)))
        offset += n
    if too_long:
        log.warning("%d sentence(s) exceed the scoring budget of %d tokens and were split", too_long, budget)

    out = []
    i = 0
    while i < len(spans):
        j = i
        total = 0
        while j < len(spans) and total + spans[j][1] - spans[j][0] <= budget:
            total += spans[j][1] - spans[j][0]
            j += 1
        lo = spans[i][0]
        ctx = i
        while ctx > 0 and spans[i][0] - spans[ctx - 1][0] <= context_size:
            ctx -= 1
        out.append(block(spans[ctx][0], lo, spans[j - 1][1]))
        i = j
    return out


def sentence_blocks(sentences: Sequence[np.ndarray], max_len: int, eos_id: int = 0) -> list[Block]:
    """One training example per sentence; sentences over ``max_len`` are cut into pieces."""
    sentences = [np.asarray(s, dtype=np.int64) for s in sentences if len(s)]
    if not sentences:
        return []
    stream = np.concatenate(sentences)
    prev = _shifted(stream, eos_id)
    out = []
    offset = 0
    for s in sentences:
        for a in range(0, len(s), max_len):
            lo, hi = offset + a, offset + min(a + max_len, len(s))
            pos = np.arange(lo, hi)
            out.append(Block(prev[lo:hi].copy(), stream[lo:hi].copy(), np.ones(hi - lo, dtype=bool), pos))
        offset += len(s)
    return out


def batch_groups(lengths: Sequence[int], token_budget: int) -> list[list[int]]:
    """Sort by length and greedily fill groups while ``count * max_len <= budget``."""
    lengths = [int(n) for n in lengths]
    for i, n in enumerate(lengths):
        if n > token_budget:
            raise ValueError(f"example {i} has {n} tokens, more than the budget {token_budget}")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    groups: list[list[int]] = []
    cur: list[int] = []
    for i in order:
        if cur and (len(cur) + 1) * lengths[i] > token_budget:
            groups.append(cur)
            cur = []
        cur.append(i)
    if cur:
        groups.append(cur)
    return groups


def collate(blocks: Sequence[Block], indices: Sequence[int], pad_id: int = 0) -> Batch:
    width = max(len(blocks[i]) for i in indices)
    n = len(indices)
    inputs = np.full((n, width), pad_id, dtype=np.int64)
    targets = np.full((n, width), pad_id, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    score = np.zeros((n, width), dtype=bool)
    positions = np.full((n, width), -1, dtype=np.int64)
    for r, i in enumerate(indices):
        b = blocks[i]
        k = len(b)
        inputs[r, :k] = b.inputs
        targets[r, :k] = b.targets
        mask[r, :k] = True
        score[r, :k] = b.score
        positions[r, :k] = b.positions
    return Batch(inputs, targets, mask, score, positions, np.asarray(indices, dtype=np.int64))


def make_batches(
    examples: Sequence[Block],
    token_budget: int,
    seed: int | None = None,
    pad_id: int = 0,
) -> list[Batch]:
    """Group examples of similar length under a padded token budget.

    Batch order is shuffled when ``seed`` is given.
    """
    groups = batch_groups([len(e) for e in examples], token_budget)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(groups))
        groups = [groups[i] for i in perm]
    return [collate(examples, g, pad_id) for g in groups]


class BatchIterator:
    """Endless batch stream; each epoch reshuffles with ``seed + epoch``.

    The position is fully described by ``(epoch, cursor)``, which is what a
    checkpoint stores.
    """

    def __init__(self, examples: Sequence[Block], token_budget: int, seed: int = 0, pad_id: int = 0):
        if not examples:
            raise ValueError("no training examples")
        self.examples = list(examples)
        self.token_budget = token_budget
        self.seed = seed
        self.pad_id = pad_id
        self.epoch = 0
        self.cursor = 0
        self._groups = self._epoch_groups()

    def _epoch_groups(self) -> list[list[int]]:
        groups = batch_groups([len(e) for e in self.examples], self.token_budget)
        perm = np.random.default_rng(self.seed + self.epoch).permutation(len(groups))
        return [groups[i] for i in perm]

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if self.cursor >= len(self._groups):
            self.epoch += 1
            self.cursor = 0
            self._groups = self._epoch_groups()
        g = self._groups[self.cursor]
        self.cursor += 1
        return collate(self.examples, g, self.pad_id)

    def state_dict(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._groups = self._epoch_groups()
