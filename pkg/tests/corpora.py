"""Deterministic synthetic corpora for trainability checks."""
from __future__ import annotations

import numpy as np

SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "de", "pa", "gu", "ze"]


def make_words(n: int, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    out = []
    while len(out) < n:
        w = "".join(rng.choice(SYLLABLES, size=rng.integers(1, 5)))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def markov_corpus(n_sentences: int, vocab_size: int = 2000, seed: int = 0, follow: float = 0.7) -> list[str]:
    """Zipf-distributed words where each word prefers a few specific successors."""
    rng = np.random.default_rng(seed)
    words = make_words(vocab_size, rng)
    zipf = 1.0 / np.arange(1, vocab_size + 1)
    zipf /= zipf.sum()
    successors = rng.choice(vocab_size, size=(vocab_size, 4), p=zipf)
    lines = []
    for _ in range(n_sentences):
        n = int(rng.integers(5, 25))
        cur = int(rng.choice(vocab_size, p=zipf))
        sent = [cur]
        for _ in range(n - 1):
            if rng.random() < follow:
                cur = int(successors[cur, rng.integers(4)])
            else:
                cur = int(rng.choice(vocab_size, p=zipf))
            sent.append(cur)
        lines.append(" ".join(words[i] for i in sent))
    return lines
