import json
import struct

import numpy as np
import pytest
from conftest import small_config
from oracles import decoder_formula

from adaptive_lm import tensor as T
from adaptive_lm.config import load_preset
from adaptive_lm.model import LanguageModel
from adaptive_lm.params import count_parameters, model_breakdown
from adaptive_lm.trainer import Trainer, write_checkpoint, model_checkpoint

V = 20
WORDS = [f"w{i}x" for i in range(V)]

VARIANTS = {
    "adp": {},
    "adp-t": {"model.tie_embeddings": True, "model.tie_projections": True},
    "adp-emb-tied": {"model.tie_embeddings": True},
    "adp-narrow": {"model.adaptive_dim": 8, "model.adaptive_factor": 2},
    "asm": {"model.input": "embedding"},
    "sm": {"model.input": "embedding", "model.output": "softmax"},
    "sm-t": {"model.input": "embedding", "model.output": "softmax", "model.tie_embeddings": True},
    "bpe-t": {"model.input": "embedding", "model.output": "softmax", "model.tie_embeddings": True,
              "model.input_dim": 16, "model.output_dim": 16},
    "cnn": {"model.input": "charcnn", "model.highway_layers": 2},
    "head-private": {"model.output_head_projection": "private"},
    "head-tied": {"model.tie_embeddings": True, "model.output_head_projection": "tied"},
}


def build(name, **extra):
    cfg = small_config(**VARIANTS[name], **extra)
    return cfg, LanguageModel(cfg, V, WORDS)


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_formula_matches_enumeration(name):
    cfg, model = build(name)
    chars = len(model.input_layer.chars) if name == "cnn" else None
    formula = count_parameters(cfg, V, char_inventory=chars)
    assert formula == model_breakdown(model)
    assert formula.total == model.num_parameters()


def read_blob_sizes(path):
    raw = open(path, "rb").read()
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    header = json.loads(raw[20 : 20 + hlen])
    return sum(int(np.prod(e["shape"])) for e in header["params"]), header["aliases"]


@pytest.mark.parametrize("name", ["adp", "adp-t", "sm-t", "cnn"])
def test_formula_matches_serialized_blobs(tmp_path, name):
    cfg, model = build(name)
    write_checkpoint(tmp_path / "m.bin", model_checkpoint(model))
    total, aliases = read_blob_sizes(tmp_path / "m.bin")
    chars = len(model.input_layer.chars) if name == "cnn" else None
    assert total == count_parameters(cfg, V, char_inventory=chars).total
    assert bool(aliases) == bool(cfg["model.tie_embeddings"])


def test_decoder_only_degenerate_count():
    cfg, model = build("adp")
    assert model_breakdown(model).decoder == decoder_formula(2, 16, 32)
    assert sum(p.size for p in model.decoder.parameters()) == decoder_formula(2, 16, 32)


@pytest.mark.parametrize("name", ["adp", "adp-t"])
def test_composed_model_gradient(name):
    cfg, model = build(name)
    model.eval()
    inp = np.array([[1, 5, 12, 19]])
    tgt = np.array([[5, 12, 19, 3]])
    report = T.grad_check(lambda *_: T.tsum(model.token_nll(model.hidden(inp), tgt)), model.parameters())
    assert report.ok, report


def test_prefix_predictions_are_causal():
    cfg, model = build("adp-t")
    model.eval()
    a = model.log_probs(np.array([[1, 2, 3, 4, 5]]))
    b = model.log_probs(np.array([[1, 2, 3, 9, 9]]))
    assert np.array_equal(a[:, :3], b[:, :3])


def test_log_probs_normalize():
    for name in ("adp", "sm", "cnn"):
        _, model = build(name)
        lp = model.log_probs(np.array([[0, 3, 7]]))
        assert np.allclose(np.exp(lp).sum(-1), 1.0, atol=1e-9)


def test_tying_survives_training_step_and_checkpoint(tmp_path):
    from adaptive_lm.data import BatchIterator, make_blocks

    cfg, model = build("adp-t", **{"model.dtype": "float32"})
    blocks = make_blocks([np.arange(V)] * 4, 8)
    trainer = Trainer(model, BatchIterator(blocks, 64), cfg)
    out = model.output_layer
    before = model.input_layer.tables[1].data.copy()
    trainer.train_step()
    assert not np.array_equal(before, model.input_layer.tables[1].data)
    assert out.tail_tables[0] is model.input_layer.tables[1]
    assert np.array_equal(out.tail_tables[0].data, model.input_layer.tables[1].data)
    trainer.save(tmp_path / "c.bin")

    _, fresh = build("adp", **{"model.dtype": "float32"})  # untied skeleton; aliases come from the file
    other = Trainer(fresh, BatchIterator(blocks, 64), cfg)
    other.load(tmp_path / "c.bin")
    assert fresh.output_layer.tail_tables[0] is fresh.input_layer.tables[1]
    fresh.input_layer.tables[2].data[0, 0] = 123.0
    assert fresh.output_layer.tail_tables[1].data[0, 0] == 123.0
    assert len(other.optimizer.velocity) == len(model.parameters())


@pytest.mark.parametrize("preset,expected", [
    ("adp-t-wikitext", 246.9e6), ("adp-wikitext", 291.3e6), ("asm-wikitext", 263.1e6),
    ("sm-wikitext", 476.8e6), ("sm-t-wikitext", 339.7e6), ("bpe-wikitext", 269.8e6), ("bpe-t-wikitext", 235.7e6),
    ("cnn-wikitext", 266.3e6), ("adp-billionword", 458.4e6), ("adp-t-billionword", 330.8e6),
    ("asm-billionword", 532.8e6), ("bpe-billionword", 267.8e6), ("bpe-t-billionword", 234.7e6),
    ("cnn-billionword", 365.7e6),
])
def test_preset_totals(preset, expected):
    total = count_parameters(load_preset(preset)).total
    assert abs(total - expected) / expected < 0.01
