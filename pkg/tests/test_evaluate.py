import math

import numpy as np
import pytest
from conftest import small_config

from adaptive_lm import tensor as T
from adaptive_lm.data import EVAL_SENTENCE_ALIGNED, make_blocks
from adaptive_lm.evaluate import (
    NO_PREDECESSOR,
    EvalReport,
    bin_index,
    bin_loss,
    evaluate,
    word_level,
)
from adaptive_lm.model import LanguageModel


class UniformModel:
    """Assigns probability 1/V to every token."""

    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def batch_nll(self, batch, scored_only=False):
        rows = np.flatnonzero((batch.score if scored_only else batch.mask).reshape(-1))
        return T.Tensor(np.full(rows.size, math.log(self.vocab_size))), rows


class LastUnitModel:
    """Loss 1 for every unit; used to check how word losses add up."""

    def batch_nll(self, batch, scored_only=False):
        rows = np.flatnonzero(batch.score.reshape(-1))
        return T.Tensor(np.ones(rows.size)), rows


def sentences(seed=0, n=30, vocab=20):
    r = np.random.default_rng(seed)
    return [r.integers(1, vocab, size=r.integers(1, 15)) for _ in range(n)]


def test_uniform_model_perplexity_is_vocab_size():
    blocks = make_blocks(sentences(), 16, EVAL_SENTENCE_ALIGNED)
    report = evaluate(UniformModel(37), blocks)
    assert math.isclose(report.perplexity, 37.0, rel_tol=1e-12)


@pytest.mark.parametrize("context", [0, 4, 12])
def test_every_position_scored_once(context):
    sents = sentences(1)
    blocks = make_blocks(sents, 16, EVAL_SENTENCE_ALIGNED, context_size=context)
    report = evaluate(UniformModel(5), blocks)
    n = sum(len(s) for s in sents)
    assert np.array_equal(report.positions, np.arange(n))
    assert np.array_equal(report.token_ids, np.concatenate(sents))
    assert report.prev_ids[0] == NO_PREDECESSOR
    assert np.array_equal(report.prev_ids[1:], np.concatenate(sents)[:-1])


def test_batched_matches_one_block_at_a_time():
    cfg = small_config()
    model = LanguageModel(cfg, 20, seed=2)
    blocks = make_blocks(sentences(3), 16, EVAL_SENTENCE_ALIGNED, context_size=6)
    one = evaluate(model, blocks)
    many = evaluate(model, blocks, token_budget=64)
    np.testing.assert_allclose(one.losses, many.losses, rtol=1e-6, atol=1e-9)
    assert np.array_equal(one.positions, many.positions)


def test_merge_rejects_overlap():
    r = EvalReport(np.array([1]), np.array([-1]), np.array([0.5]), np.array([0]))
    with pytest.raises(ValueError):
        EvalReport.merge([r, r])


def test_loss_sidecar_round_trip(tmp_path):
    r = EvalReport(np.array([3, 4]), np.array([-1, 3]), np.array([0.25, 1.5]), np.array([0, 1]))
    r.save_losses(tmp_path / "x.losses")
    back = EvalReport.load_losses(tmp_path / "x.losses")
    for f in ("token_ids", "prev_ids", "losses", "positions"):
        assert np.array_equal(getattr(r, f), getattr(back, f))
    assert (tmp_path / "x.losses").stat().st_size == 2 * 24


# -- word level ---------------------------------------------------------------


def report_of(losses):
    n = len(losses)
    return EvalReport(np.arange(n), np.full(n, -1), np.asarray(losses, dtype=float), np.arange(n))


def test_one_unit_per_word_is_identity():
    r = report_of([0.5, 1.0, 2.0])
    w = word_level(r, np.ones(3, dtype=bool))
    assert np.array_equal(w.losses, r.losses) and w.perplexity == r.perplexity


def test_word_loss_is_sum_of_unit_losses():
    # words: [0,1] [2] [3,4,5]
    ends = np.array([0, 1, 1, 0, 0, 1], dtype=bool)
    r = report_of([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    w = word_level(r, ends)
    np.testing.assert_allclose(w.losses, [0.3, 0.3, 1.5])
    # product rule: word probability is the product of unit probabilities
    assert math.isclose(math.exp(-w.losses[2]), math.exp(-0.4) * math.exp(-0.5) * math.exp(-0.6))
    assert math.isclose(w.perplexity, math.exp(2.1 / 3))


def test_splitting_every_word_in_two_squares_perplexity():
    # each word has two units, each with loss 1: unit ppl e, word ppl e^2
    n_words = 10
    units = [np.arange(1, 2 * n_words + 1)]
    blocks = make_blocks(units, 8, EVAL_SENTENCE_ALIGNED)
    unit_report = evaluate(LastUnitModel(), blocks)
    ends = np.tile([False, True], n_words)
    word_report = word_level(unit_report, ends)
    assert math.isclose(unit_report.perplexity, math.e)
    assert math.isclose(word_report.perplexity, math.e**2)
    assert word_report.n_tokens == n_words


def test_partial_word_rejected():
    with pytest.raises(ValueError):
        word_level(report_of([1.0, 1.0]), np.array([False, False]))


# -- frequency bins -----------------------------------------------------------

IDS = np.array([0, 1, 2, 3, 4, 5] * 3 + [3, 3])
LOSSES = np.array([1.0, 2, 3, 4, 5, 6] * 3 + [2, 6])
FREQS = np.array([5, 10, 11, 100, 5000, 2_000_000])


def fixture_report():
    prev = np.concatenate(([NO_PREDECESSOR], IDS[:-1]))
    return EvalReport(IDS, prev, LOSSES, np.arange(IDS.size))


def by_label(binned):
    return {label: (types, count, mean) for label, types, count, mean in binned.rows() if count}


def test_bin_edges_are_inclusive_upper_bounds():
    assert bin_index([1, 10, 11, 100, 101, 1000, 1_000_000, 1_000_001]).tolist() == [0, 0, 1, 1, 2, 2, 5, 6]


def test_current_word_bins_match_hand_count():
    got = by_label(bin_loss(fixture_report(), FREQS, "current"))
    assert got.keys() == {"10", "100", "10K", "1M+"}
    assert got["10"][:2] == (2, 6) and math.isclose(got["10"][2], 1.5)
    assert got["100"][:2] == (2, 8) and math.isclose(got["100"][2], 3.625)
    assert got["10K"][:2] == (1, 3) and math.isclose(got["10K"][2], 5.0)
    assert got["1M+"][:2] == (1, 3) and math.isclose(got["1M+"][2], 6.0)


def test_previous_word_bins_match_hand_count():
    binned = bin_loss(fixture_report(), FREQS, "previous")
    got = by_label(binned)
    assert binned.excluded == 1 and binned.n_tokens == 19
    assert got["10"][1] == 6 and math.isclose(got["10"][2], 2.5)
    assert got["100"][1] == 7 and math.isclose(got["100"][2], 33 / 7)
    assert got["10K"][1] == 3 and math.isclose(got["10K"][2], 6.0)
    assert got["1M+"][1] == 3 and math.isclose(got["1M+"][2], 4 / 3)


def test_bins_csv(tmp_path):
    bin_loss(fixture_report(), FREQS, "current").write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "bin_bound,types,token_count,mean_loss"
    assert lines[1] == "10,2,6,1.500000"
    assert lines[3] == "1K,0,0,"
    assert len(lines) == 8
