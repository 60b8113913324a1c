"""Frequency-ordered vocabularies, band partitions and the binarized token format."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
EOS = "</s>"

TOKENS_MAGIC = b"ALMT"
TOKENS_VERSION = 1
_TOKENS_HEADER = struct.Struct("<4sHHIQ")  # magic, version, reserved, vocab crc32, count


@dataclass
class Vocabulary:
    """Words sorted by descending training count; ties keep first-occurrence order."""

    words: list[str]
    counts: list[int]
    unk_id: int
    eos_id: int
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.words) != len(self.counts):
            raise ValueError("words and counts differ in length")
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.fromiter((self._index.get(t, self.unk_id) for t in tokens), dtype=np.int64)

    def encode_line(self, line: str) -> np.ndarray:
        ids = self.encode(line.split())
        return np.append(ids, self.eos_id)

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]

    @property
    def freq(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    def checksum(self) -> int:
        return zlib.crc32("\n".join(self.words).encode("utf-8"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w, c in zip(self.words, self.counts):
                f.write(f"{w}\t{c}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words, counts = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                word, sep, count = line.rpartition("\t")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'word<TAB>count'")
                words.append(word)
                counts.append(int(count))
        if UNK not in words or EOS not in words:
            raise ValueError(f"{path}: vocabulary lacks {UNK} or {EOS}")
        return cls(words, counts, words.index(UNK), words.index(EOS))


def build_vocabulary(lines: Iterable[str], min_count: int = 3) -> Vocabulary:
    """Count whitespace tokens (plus one end-of-sentence per line) and keep
    words seen more than ``min_count`` times; everything else becomes ``<unk>``.
    """
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    pos = 0
    n_lines = 0
    eos_first = None
    for line in lines:
        for tok in line.split():
            if tok in counts:
                counts[tok] += 1
            else:
                counts[tok] = 1
                first[tok] = pos
            pos += 1
        if eos_first is None:
            eos_first = pos
        pos += 1
        n_lines += 1
    counts.pop(EOS, None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    kept = []
    unk_count = counts.pop(UNK, 0)
    unk_first = first.get(UNK, float("inf"))
    for w, c in counts.items():
        if c > min_count:
            kept.append((w, c, first[w]))
        else:
            unk_count += c
            unk_first = min(unk_first, first[w])
    kept.append((UNK, unk_count, unk_first))
    kept.append((EOS, n_lines, eos_first))
    kept.sort(key=lambda e: (-e[1], e[2]))
    words = [w for w, _, _ in kept]
    return Vocabulary(words, [c for _, c, _ in kept], words.index(UNK), words.index(EOS))


def encode_corpus(vocab: Vocabulary, lines: Iterable[str]) -> list[np.ndarray]:
    """One id array per sentence, each terminated by the end-of-sentence id."""
    return [vocab.encode_line(line) for line in lines]


# -- band partitions -----------------------------------------------------------


@dataclass(frozen=True)
class ClusterPartition:
    """Contiguous frequency bands with dimensions d, d/k, d/k^2, ..."""

    band_sizes: tuple[int, ...]
    head_dim: int
    factor: int

    def __post_init__(self):
        if not self.band_sizes or any(s <= 0 for s in self.band_sizes):
            raise ValueError(f"band sizes must be positive, got {list(self.band_sizes)}")
        if self.factor < 1:
            raise ValueError(f"capacity factor must be >= 1, got {self.factor}")
        for i in range(len(self.band_sizes)):
            div = self.factor**i
            if self.head_dim % div or self.head_dim // div < 1:
                raise ValueError(
                    f"band {i} dimension {self.head_dim}/{div} is not a positive integer"
                )

    @property
    def n_bands(self) -> int:
        return len(self.band_sizes)

    @property
    def band_dims(self) -> tuple[int, ...]:
        return tuple(self.head_dim // self.factor**i for i in range(self.n_bands))

    @property
    def vocab_size(self) -> int:
        return sum(self.band_sizes)

    @property
    def boundaries(self) -> tuple[int, ...]:
        """Start offsets of every band plus the vocabulary size."""
        return tuple(int(x) for x in np.cumsum((0,) + tuple(self.band_sizes)))

    def band_range(self, i: int) -> tuple[int, int]:
        b = self.boundaries
        return b[i], b[i + 1]

    def band_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return np.searchsorted(np.asarray(self.boundaries[1:]), ids, side="right")

    @classmethod
    def from_cutoffs(cls, vocab_size: int, cutoffs: Sequence[int], head_dim: int, factor: int):
        """Bands split at cumulative ``cutoffs``; the last band takes the rest."""
        edges = [0, *cutoffs, vocab_size]
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"cutoffs {list(cutoffs)} must increase strictly below vocab size {vocab_size}")
        return cls(tuple(b - a for a, b in zip(edges, edges[1:])), head_dim, factor)


def partition_vocab(vocab, band_sizes: Sequence[int], d: int, k: int) -> ClusterPartition:
    """Split a vocabulary (or a vocabulary size) into frequency bands."""
    size = vocab if isinstance(vocab, int) else len(vocab)
    if sum(band_sizes) != size:
        raise ValueError(f"band sizes sum to {sum(band_sizes)}, expected vocabulary size {size}")
    return ClusterPartition(tuple(int(s) for s in band_sizes), int(d), int(k))


# -- binarized token streams ---------------------------------------------------


def write_tokens(path, ids: np.ndarray, vocab: Vocabulary) -> None:
    """Little-endian uint32 ids behind a header with magic, version and vocab crc32."""
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= len(vocab)):
        raise ValueError("token id outside vocabulary")
    with open(path, "wb") as f:
        f.write(_TOKENS_HEADER.pack(TOKENS_MAGIC, TOKENS_VERSION, 0, vocab.checksum(), arr.size))
        f.write(arr.astype("<u4").tobytes())


def read_tokens(path, vocab: Vocabulary | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _TOKENS_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, _, crc, count = _TOKENS_HEADER.unpack_from(raw)
    if magic != TOKENS_MAGIC:
        raise ValueError(f"{path}: not a token file")
    if version != TOKENS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if vocab is not None and crc != vocab.checksum():
        raise ValueError(f"{path}: vocabulary checksum mismatch")
    ids = np.frombuffer(raw, dtype="<u4", count=count, offset=_TOKENS_HEADER.size)
    return ids.astype(np.int64)


def split_sentences(ids: np.ndarray, eos_id: int) -> list[np.ndarray]:
    """Cut a flat stream after every end-of-sentence id."""
    ends = np.flatnonzero(np.asarray(ids) == eos_id) + 1
    parts = np.split(np.asarray(ids), ends)
    return [p for p in parts if p.size]
