"""Byte-pair encoding: greedy merge learning and deterministic application.

Words are split into characters and the end-of-word marker is glued to the
final character (``"ab" -> ["a", "b</w>"]``). Characters never seen in the
training text map to a reserved symbol.
"""
from __future__ import annotations

import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import _kernels

log = logging.getLogger(__name__)

EOW = "</w>"
UNK_CHAR = "<unkc>"


def word_symbols(word: str, alphabet: set[str] | None = None) -> list[str]:
    chars = [c if alphabet is None or c in alphabet else UNK_CHAR for c in word]
    chars[-1] = chars[-1] + EOW
    return chars


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    alphabet: list[str]
    _symbols: dict[str, int] = field(default_factory=dict, repr=False)
    _segmenter: object = field(default=None, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._alphabet_set = set(self.alphabet)
        base = [UNK_CHAR, UNK_CHAR + EOW]
        for c in self.alphabet:
            base += [c, c + EOW]
        table: dict[str, int] = {}
        for s in base:
            table.setdefault(s, len(table))
        triples = []
        for a, b in self.merges:
            for s in (a, b, a + b):
                table.setdefault(s, len(table))
            triples.append((table[a], table[b], table[a + b]))
        self._symbols = table
        self._names = list(table)
        self._segmenter = _kernels.BpeSegmenter(triples)

    @property
    def base_symbols(self) -> list[str]:
        return self._names[: 2 * len(self.alphabet) + 2]

    def segment_word(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is None:
            ids = [self._symbols[s] for s in word_symbols(word, self._alphabet_set)]
            hit = tuple(self._names[i] for i in self._segmenter.segment(ids))
            self._cache[word] = hit
        return hit

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{len(self.merges)}\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")
            f.write(" ".join(self.alphabet) + "\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        n = int(lines[0])
        merges = []
        for line in lines[1 : n + 1]:
            a, b = line.split(" ")
            merges.append((a, b))
        alphabet = lines[n + 1].split(" ") if len(lines) > n + 1 and lines[n + 1] else []
        return cls(merges, alphabet)


@dataclass
class Segmentation:
    """Sub-word units of a line plus, per unit, whether it closes a word."""

    units: list[str]
    word_ends: list[bool]


def learn_bpe(lines: Iterable[str], num_codes: int) -> BpeModel:
    """Repeatedly merge the most frequent adjacent symbol pair.

    Pair-count ties go to the lexicographically smallest pair. Stops early,
    with a warning, if no pair is left to merge.
    """
    if num_codes < 0:
        raise ValueError(f"num_codes must be non-negative, got {num_codes}")
    vocab = Counter()
    for line in lines:
        vocab.update(line.split())
    if not vocab:
        raise ValueError("cannot learn BPE from an empty corpus")
    alphabet = sorted({c for w in vocab for c in w})
    words = [word_symbols(w) for w in vocab]
    freqs = list(vocab.values())

    counts: dict[tuple[str, str], int] = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for i, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            counts[pair] += f
            where.setdefault(pair, set()).add(i)
    heap = [(-c, p) for p, c in counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_codes:
        best = None
        while heap:
            neg, pair = heapq.heappop(heap)
            if counts.get(pair, 0) == -neg and -neg > 0:
                best = pair
                break
        if best is None:
            log.warning("BPE stopped after %d merges: no pairs left", len(merges))
            break
        merges.append(best)
        a, b = best
        merged = a + b
        touched: dict[tuple[str, str], int] = {}
        for i in sorted(where.pop(best, ())):
            sym = words[i]
            f = freqs[i]
            for pair in zip(sym, sym[1:]):
                counts[pair] -= f
                touched[pair] = counts[pair]
            out = []
            j = 0
            while j < len(sym):
                if j + 1 < len(sym) and sym[j] == a and sym[j + 1] == b:
                    out.append(merged)
                    j += 2
                else:
                    out.append(sym[j])
                    j += 1
            words[i] = out
            for pair in zip(out, out[1:]):
                counts[pair] += f
                touched[pair] = counts[pair]
                where.setdefault(pair, set()).add(i)
        counts.pop(best, None)
        for pair, c in touched.items():
            if pair == best:
                continue
            if c > 0:
                heapq.heappush(heap, (-c, pair))
            else:
                counts.pop(pair, None)
                where.pop(pair, None)
    return BpeModel(merges, alphabet)


def apply_bpe(model: BpeModel, text: str | Sequence[str]) -> Segmentation:
    words = text.split() if isinstance(text, str) else list(text)
    units: list[str] = []
    ends: list[bool] = []
    for w in words:
        seg = model.segment_word(w)
        units.extend(seg)
        ends.extend([False] * (len(seg) - 1) + [True])
    return Segmentation(units, ends)


def invert_bpe(units: Sequence[str]) -> list[str]:
    """Glue units back into words by cutting after every end-of-word marker."""
    words, cur = [], []
    for u in units:
        if u.endswith(EOW):
            cur.append(u[: -len(EOW)])
            words.append("".join(cur))
            cur = []
        else:
            cur.append(u)
    if cur:
        raise ValueError("unit sequence does not end at a word boundary")
    return words
