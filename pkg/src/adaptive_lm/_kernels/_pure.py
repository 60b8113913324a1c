"""Reference implementations of the hot kernels in plain Python/numpy."""
from __future__ import annotations

import numpy as np


def scatter_add_rows(target: np.ndarray, index: np.ndarray, src: np.ndarray) -> None:
    """``target[index[i]] += src[i]`` for every i, accumulating duplicates."""
    np.add.at(target, index, src)


class BpeSegmenter:
    """Applies ranked merges to a word given as a sequence of integer symbol ids.

    ``merges`` is an ordered list of ``(left, right, merged)`` triples; earlier
    entries have higher priority.
    """

    def __init__(self, merges):
        self._table = {}
        for rank, (a, b, new) in enumerate(merges):
            self._table.setdefault((int(a), int(b)), (rank, int(new)))

    def segment(self, symbols) -> np.ndarray:
        table = self._table
        word = [int(s) for s in symbols]
        while len(word) > 1:
            best = None
            for pair in zip(word, word[1:]):
                hit = table.get(pair)
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = (hit[0], pair, hit[1])
            if best is None:
                break
            _, (a, b), new = best
            out = []
            i = 0
            n = len(word)
            while i < n:
                if i + 1 < n and word[i] == a and word[i + 1] == b:
                    out.append(new)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            word = out
        return np.asarray(word, dtype=np.int32)
