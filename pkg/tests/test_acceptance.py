"""End-to-end acceptance checks, one test group per numbered criterion.

Every group also prints a PASS/FAIL line in the terminal summary.
"""
import math
import re
import time

import numpy as np
import pytest
from conftest import small_config
from corpora import markov_corpus
from oracles import flat_adaptive_probs, unigram_perplexity

from adaptive_lm import tensor as T
from adaptive_lm.adaptive_softmax import AdaptiveSoftmax
from adaptive_lm.bpe import apply_bpe, invert_bpe, learn_bpe
from adaptive_lm.cli import main
from adaptive_lm.config import load_preset, tiny
from adaptive_lm.data import EVAL_SENTENCE_ALIGNED, BatchIterator, collate, make_blocks
from adaptive_lm.evaluate import NO_PREDECESSOR, EvalReport, bin_loss, evaluate, word_level
from adaptive_lm.inputs import CharCnnEncoder
from adaptive_lm.model import LanguageModel
from adaptive_lm.optim import LrSchedule, clip_gradients, global_norm
from adaptive_lm.params import count_parameters
from adaptive_lm.trainer import Trainer
from adaptive_lm.vocab import ClusterPartition, build_vocabulary, encode_corpus

WIKITEXT_TARGETS = {
    "adp-t-wikitext": 246.9e6,
    "adp-wikitext": 291.3e6,
    "asm-wikitext": 263.1e6,
    "sm-wikitext": 476.8e6,
    "sm-t-wikitext": 339.7e6,
}


# 1 ----------------------------------------------------------------------------
@pytest.mark.criterion(1, "parameter counts of the wikitext presets within 1%")
@pytest.mark.parametrize("preset", sorted(WIKITEXT_TARGETS))
def test_c1_parameter_counts(preset, capsys):
    started = time.perf_counter()
    assert main(["params", "--preset", preset]) == 0
    elapsed = time.perf_counter() - started
    out = capsys.readouterr().out
    total = int(re.search(r"^total\s+([\d,]+)", out, re.M).group(1).replace(",", ""))
    target = WIKITEXT_TARGETS[preset]
    assert abs(total - target) / target < 0.01, (preset, total)
    assert elapsed < 1.0


# 2 ----------------------------------------------------------------------------
@pytest.mark.criterion(2, "billion-word input+output reductions near 23% and 61%")
def test_c2_reductions():
    base = count_parameters(load_preset("asm-billionword"))
    adaptive = count_parameters(load_preset("adp-billionword"))
    tied = count_parameters(load_preset("adp-t-billionword"))
    assert abs(100 * adaptive.reduction_vs(base) - 23) <= 3
    assert abs(100 * tied.reduction_vs(base) - 61) <= 3


# 3 ----------------------------------------------------------------------------
@pytest.mark.criterion(3, "adaptive softmax equals the flattened oracle on 1000 instances")
def test_c3_softmax_oracle():
    started = time.perf_counter()
    r = np.random.default_rng(3)
    checked = 0
    while checked < 1000:
        n_bands = int(r.integers(2, 5))
        k = int(r.integers(1, 3))
        d = int(k ** (n_bands - 1) * r.integers(1, 3))
        sizes = tuple(int(s) for s in r.integers(1, 64 // n_bands + 1, size=n_bands))
        head_projection = ("none", "private")[checked % 2]
        layer = AdaptiveSoftmax(
            ClusterPartition(sizes, d, k), r, 0.0, head_projection, np.float64
        )
        for p in layer.parameters():
            p.data[...] = r.normal(scale=1.5, size=p.data.shape)
        h = r.normal(size=(3, d))
        probs = np.exp(layer.log_probs(T.Tensor(h)).data)
        assert sum(sizes) <= 64
        np.testing.assert_allclose(probs, flat_adaptive_probs(layer, h), rtol=0, atol=1e-9)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-5)
        checked += 1
    assert time.perf_counter() - started < 30


# 4 ----------------------------------------------------------------------------
@pytest.mark.criterion(4, "finite-difference check of the composed model")
@pytest.mark.parametrize("tied", [False, True])
def test_c4_gradients(tied):
    cfg = small_config(**{"model.tie_embeddings": tied, "model.tie_projections": tied})
    model = LanguageModel(cfg, 20, seed=4)
    model.eval()
    inp, tgt = np.array([[1, 5, 12, 19, 0]]), np.array([[5, 12, 19, 0, 7]])
    report = T.grad_check(lambda *_: T.tsum(model.token_nll(model.hidden(inp), tgt)), model.parameters())
    assert report.failure is None and report.worst < 1e-4, report


# 5 ----------------------------------------------------------------------------
@pytest.mark.criterion(5, "tied storage survives optimizer steps and checkpoints")
def test_c5_tying(tmp_path):
    cfg = small_config(**{"model.tie_embeddings": True, "model.tie_projections": True})
    model = LanguageModel(cfg, 20, seed=5)
    blocks = make_blocks([np.arange(1, 20)] * 4, 8)
    trainer = Trainer(model, BatchIterator(blocks, 64), cfg)
    inp, out = model.input_layer, model.output_layer
    before = [t.data.copy() for t in inp.tables[1:]] + [p.data.copy() for p in inp.projections[1:]]
    trainer.train_step()
    after_in = [t.data for t in inp.tables[1:]] + [p.data for p in inp.projections[1:]]
    after_out = [t.data for t in out.tail_tables] + [p.data for p in out.tail_projections]
    for b, a, o in zip(before, after_in, after_out):
        assert not np.array_equal(b, a)
        assert np.array_equal(a, o)
    assert np.array_equal(inp.tables[0].data, out.head_words.data)
    trainer.save(tmp_path / "c.bin")

    fresh = LanguageModel(small_config(), 20, seed=6)
    Trainer(fresh, BatchIterator(blocks, 64), cfg).load(tmp_path / "c.bin")
    fresh.input_layer.tables[0].data[2, 3] = 42.0
    fresh.input_layer.projections[2].data[0, 0] = -7.0
    assert fresh.output_layer.head_words.data[2, 3] == 42.0
    assert fresh.output_layer.tail_projections[1].data[0, 0] == -7.0


# 6 ----------------------------------------------------------------------------
@pytest.mark.criterion(6, "schedule warmup endpoints and cycle totals")
def test_c6_schedule():
    wiki = LrSchedule.from_config(load_preset("adp-t-wikitext"))
    billion = LrSchedule.from_config(load_preset("adp-t-billionword"))
    assert wiki.lr_at(0) == 1e-7 and wiki.lr_at(16_000) == 1.0
    assert wiki.total_steps == 286_000
    assert billion.total_steps == 975_000


# 7 ----------------------------------------------------------------------------
@pytest.mark.criterion(7, "global-norm clipping to 0.1")
def test_c7_clipping():
    r = np.random.default_rng(7)
    for _ in range(2000):
        scale = 10 ** r.uniform(-4, 3)
        grads = [r.normal(size=tuple(r.integers(1, 8, size=r.integers(1, 4)))) * scale for _ in range(r.integers(1, 6))]
        clipped, norm = clip_gradients(grads, 0.1)
        assert abs(global_norm(clipped) - min(norm, 0.1)) <= 1e-12


# 8 ----------------------------------------------------------------------------
def _train(cfg, examples, vocab_size, seconds_limit):
    model = LanguageModel(cfg, vocab_size, seed=cfg["seed"])
    trainer = Trainer(model, BatchIterator(examples, cfg["data.token_budget"], seed=1), cfg)
    started = time.perf_counter()
    total = trainer.schedule.total_steps
    while trainer.step < total:
        trainer.train_step()
    elapsed = time.perf_counter() - started
    assert elapsed < seconds_limit
    return model, elapsed


@pytest.mark.criterion(8, "tiny tied model memorizes 100 sentences and beats a unigram model")
def test_c8_memorization():
    r = np.random.default_rng(8)
    vocab_size = 200
    sents = [np.append(r.integers(1, vocab_size, size=r.integers(5, 15)), 0) for _ in range(100)]
    cfg = tiny(load_preset("adp-t-wikitext")).update(
        {"model.dropout": 0.0, "model.attn_dropout": 0.0, "model.relu_dropout": 0.0, "model.tail_dropout": 0.0}
    )
    assert cfg["model.model_dim"] == 64 and cfg["model.n_blocks"] == 2 and len(cfg.cutoffs(vocab_size)) == 2
    blocks = make_blocks(sents, 64)
    model, _ = _train(cfg, blocks, vocab_size, 300)
    # memorization is judged on the exact spans the model was fitted to
    report = evaluate(model, blocks, 512)
    assert report.n_tokens == 64 * len(blocks) > 900
    assert report.perplexity < 1.5, report.perplexity


@pytest.mark.criterion(8, "tiny tied model memorizes 100 sentences and beats a unigram model")
def test_c8_beats_unigram():
    lines = markov_corpus(5000, seed=1)
    assert 400_000 < sum(len(l) + 1 for l in lines) < 700_000
    train, held = lines[:4500], lines[4500:]
    vocab = build_vocabulary(train, 3)
    train_ids, held_ids = encode_corpus(vocab, train), encode_corpus(vocab, held)
    baseline = unigram_perplexity(vocab.freq, np.concatenate(held_ids))
    cfg = tiny(load_preset("adp-t-wikitext"))
    model, _ = _train(cfg, make_blocks(train_ids, 64, eos_id=vocab.eos_id), len(vocab), 600)
    report = evaluate(model, make_blocks(held_ids, 64, EVAL_SENTENCE_ALIGNED, eos_id=vocab.eos_id), 512)
    print(f"held-out perplexity {report.perplexity:.1f} vs unigram {baseline:.1f}")
    assert report.perplexity < baseline


# 9 ----------------------------------------------------------------------------
@pytest.mark.criterion(9, "two accumulated batches equal one concatenated batch")
def test_c9_accumulation():
    r = np.random.default_rng(9)
    blocks = make_blocks([r.integers(1, 20, size=r.integers(3, 12)) for _ in range(12)], 8)
    halves = [collate(blocks, [0, 1, 2]), collate(blocks, [3, 4])]
    whole = collate(blocks, [0, 1, 2, 3, 4])

    class Fixed:
        def __init__(self, batches):
            self.batches, self.i = batches, 0

        def __next__(self):
            self.i += 1
            return self.batches[(self.i - 1) % len(self.batches)]

    params = []
    for accumulation, batches in ((2, halves), (1, [whole])):
        cfg = small_config(**{"optim.accumulation_steps": accumulation, "optim.warmup_steps": 0})
        trainer = Trainer(LanguageModel(cfg, 20, seed=9), Fixed(batches), cfg)
        for _ in range(3):
            trainer.train_step()
        params.append(np.concatenate([p.data.ravel() for p in trainer.optimizer.params]))
    a, b = params
    assert np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)) < 1e-6 or np.allclose(a, b, rtol=1e-6, atol=1e-12)


# 10 ---------------------------------------------------------------------------
@pytest.mark.criterion(10, "evaluation scores each token once; batched equals sequential")
@pytest.mark.parametrize("block,context", [(512, 0), (512, 480), (3072, 2560), (64, 48)])
def test_c10_coverage(block, context):
    r = np.random.default_rng(block + context)
    sents = [r.integers(1, 20, size=r.integers(1, 60)) for _ in range(200)]
    stream = np.concatenate(sents)
    blocks = make_blocks(sents, block, EVAL_SENTENCE_ALIGNED, context_size=context)
    scored = np.sort(np.concatenate([b.positions[b.score] for b in blocks]))
    assert np.array_equal(scored, np.arange(stream.size))

    model = LanguageModel(small_config(**{"model.max_positions": 4096}), 20, seed=10)
    sequential = evaluate(model, blocks)
    batched = evaluate(model, blocks, token_budget=max(2 * block, 1024))
    assert sequential.n_tokens == batched.n_tokens == stream.size
    assert math.isclose(sequential.perplexity, batched.perplexity, rel_tol=1e-6)


# 11 ---------------------------------------------------------------------------
@pytest.mark.criterion(11, "BPE round trip and word-level perplexity")
def test_c11_bpe_round_trip(fixture_corpus):
    model = learn_bpe(fixture_corpus, 200)
    for line in fixture_corpus:
        assert invert_bpe(apply_bpe(model, line).units) == line.split()


@pytest.mark.criterion(11, "BPE round trip and word-level perplexity")
def test_c11_one_unit_per_word(fixture_corpus, caplog):
    # enough merges that every training word becomes a single unit
    bpe = learn_bpe(fixture_corpus, 100_000)
    assert "no pairs left" in caplog.text
    segs = [apply_bpe(bpe, line) for line in fixture_corpus[:40]]
    assert all(all(s.word_ends) for s in segs)
    unit_lines = [" ".join(s.units) for s in segs]
    vocab = build_vocabulary(unit_lines, 0)
    word_vocab = build_vocabulary(fixture_corpus[:40], 0)
    assert len(vocab) == len(word_vocab)
    sents = encode_corpus(vocab, unit_lines)
    ends = np.ones(sum(len(s) for s in sents), dtype=bool)  # every unit, </s> included, closes a word
    model = LanguageModel(small_config(**{"model.adaptive_cutoffs": (0.1, 0.4)}), len(vocab), seed=11)
    units = evaluate(model, make_blocks(sents, 64, EVAL_SENTENCE_ALIGNED, eos_id=vocab.eos_id))
    words = word_level(units, ends)
    assert np.array_equal(words.losses, units.losses)
    assert words.perplexity == units.perplexity


# 12 ---------------------------------------------------------------------------
FIXTURE_IDS = np.array([0, 1, 2, 3, 4, 5] * 3 + [3, 3])
FIXTURE_LOSSES = np.array([1.0, 2, 3, 4, 5, 6] * 3 + [2, 6])
FIXTURE_FREQS = np.array([5, 10, 11, 100, 5000, 2_000_000])


@pytest.mark.criterion(12, "binned analysis and char-CNN padding invariance")
def test_c12_hand_fixture():
    prev = np.concatenate(([NO_PREDECESSOR], FIXTURE_IDS[:-1]))
    report = EvalReport(FIXTURE_IDS, prev, FIXTURE_LOSSES, np.arange(20))
    cur = {l: (t, n, m) for l, t, n, m in bin_loss(report, FIXTURE_FREQS, "current").rows() if n}
    assert cur == {"10": (2, 6, 1.5), "100": (2, 8, 3.625), "10K": (1, 3, 5.0), "1M+": (1, 3, 6.0)}
    prv = bin_loss(report, FIXTURE_FREQS, "previous")
    got = {l: (n, m) for l, _, n, m in prv.rows() if n}
    assert got.keys() == {"10", "100", "10K", "1M+"} and prv.excluded == 1
    assert got["10"] == (6, 2.5) and got["10K"] == (3, 6.0)
    assert got["100"][0] == 7 and math.isclose(got["100"][1], 33 / 7, rel_tol=1e-15)
    assert got["1M+"][0] == 3 and math.isclose(got["1M+"][1], 4 / 3, rel_tol=1e-15)


@pytest.mark.criterion(12, "binned analysis and char-CNN padding invariance")
def test_c12_bins_cover_scored_tokens():
    lines = markov_corpus(400, vocab_size=500, seed=12)
    vocab = build_vocabulary(lines[:300], 1)
    held = encode_corpus(vocab, lines[300:])
    model = LanguageModel(small_config(**{"model.adaptive_cutoffs": (0.1, 0.4)}), len(vocab), seed=12)
    report = evaluate(model, make_blocks(held, 64, EVAL_SENTENCE_ALIGNED, eos_id=vocab.eos_id), 512)
    for mode in ("current", "previous"):
        binned = bin_loss(report, vocab.freq, mode)
        assert binned.n_tokens + binned.excluded == report.n_tokens
        kept = report.losses if mode == "current" else report.losses[report.prev_ids != NO_PREDECESSOR]
        assert math.isclose(math.fsum(binned.loss_sums), math.fsum(kept.tolist()), rel_tol=1e-12)


@pytest.mark.criterion(12, "binned analysis and char-CNN padding invariance")
def test_c12_char_cnn_padding():
    r = np.random.default_rng(12)
    enc = CharCnnEncoder(60, 32, r, char_dim=8, filters=((1, 8), (2, 8), (3, 16), (5, 16), (7, 16)),
                         highway_layers=2, dtype=np.float64)
    lengths = r.integers(1, 20, size=1000)
    width = int(lengths.max())
    chars = np.zeros((1000, width), dtype=np.int64)
    for i, n in enumerate(lengths):
        chars[i, :n] = r.integers(2, 60, size=n)
    tight = enc(chars, lengths).data
    wide = enc(np.concatenate([chars, np.zeros((1000, 9), dtype=np.int64)], axis=1), lengths).data
    np.testing.assert_allclose(wide, tight, rtol=0, atol=1e-12)
    for i in r.choice(1000, size=100, replace=False):
        alone = enc(chars[i : i + 1, : lengths[i]], lengths[i : i + 1]).data
        np.testing.assert_allclose(alone[0], tight[i], rtol=0, atol=1e-12)
