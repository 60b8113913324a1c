import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import decoder_formula, sinusoid

from adaptive_lm import tensor as T
from adaptive_lm.decoder import CausalSelfAttention, Decoder, DecoderConfig, causal_mask, sinusoidal_positions
from adaptive_lm.params import decoder_parameters
from adaptive_lm.tensor import Tensor

F64 = np.float64
CFG = DecoderConfig(n_blocks=2, heads=2, model_dim=16, ffn_dim=24, dropout=0.0, attn_dropout=0.0)


def test_position_zero_alternates():
    assert sinusoidal_positions(1, 8)[0].tolist() == [0, 1, 0, 1, 0, 1, 0, 1]


@given(st.integers(0, 5000), st.integers(0, 31))
def test_positions_match_scalar_formula(pos, col):
    table = sinusoidal_positions(pos + 1, 32)
    assert abs(table[pos, col] - sinusoid(pos, col, 32)) < 1e-9
    assert np.abs(table).max() <= 1.0


def test_odd_dimension_rejected():
    with pytest.raises(ValueError):
        sinusoidal_positions(3, 7)
    with pytest.raises(ValueError):
        DecoderConfig(model_dim=10, heads=3)


def test_single_position_attention_weight_is_one(rng):
    attn = CausalSelfAttention(CFG, rng, F64)
    x = Tensor(rng.normal(size=(1, 1, 16)))
    assert np.allclose(attn.weights(x).data, 1.0)
    ref = (x.data @ attn.value.weight.data + attn.value.bias.data) @ attn.out.weight.data + attn.out.bias.data
    assert np.allclose(attn(x).data, ref)


def test_uniform_values_make_output_independent_of_scores(rng):
    attn = CausalSelfAttention(CFG, rng, F64)
    attn.value.weight.data[:] = 0
    attn.value.bias.data[:] = rng.normal(size=16)
    out = attn(Tensor(rng.normal(size=(1, 5, 16)))).data[0]
    assert np.allclose(out, out[0])


def test_causal_mask_shape():
    m = causal_mask(3, F64)
    assert np.isneginf(m[0, 1]) and m[1, 0] == 0 and m[2, 2] == 0


def test_causality_bit_exact(rng):
    dec = Decoder(CFG, rng, F64).eval()
    x = rng.normal(size=(1, 6, 16))
    base = dec(Tensor(x)).data
    for t in range(5):
        y = x.copy()
        y[0, t + 1:] = rng.normal(size=y[0, t + 1:].shape)
        assert np.array_equal(dec(Tensor(y)).data[0, : t + 1], base[0, : t + 1])


def test_zeroed_sublayers_leave_only_final_norm(rng):
    dec = Decoder(CFG, rng, F64).eval()
    for block in dec.blocks:
        for p in block.attn.parameters() + block.ffn.parameters():
            p.data[:] = 0
    x = rng.normal(size=(2, 4, 16))
    assert np.allclose(dec(Tensor(x)).data, T.layer_norm(Tensor(x)).data)


@pytest.mark.parametrize("length", [1, 2, 7])
def test_output_shape(rng, length):
    assert Decoder(CFG, rng, F64)(Tensor(rng.normal(size=(length, 16)))).shape == (length, 16)


def test_parameter_count_matches_enumeration(rng):
    dec = Decoder(CFG, rng, F64)
    assert dec.num_parameters() == decoder_formula(2, 16, 24) == decoder_parameters(2, 16, 24)


def test_decoder_gradient_check(rng):
    dec = Decoder(CFG, rng, F64).eval()
    x = Tensor(rng.normal(size=(1, 4, 16)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 4, 16)))
    report = T.grad_check(lambda *_: T.tsum(T.mul(dec(x), w)), [x] + dec.parameters())
    assert report.ok, report
