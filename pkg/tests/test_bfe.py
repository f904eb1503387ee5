import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgenet import tensor as T
from bridgenet.bfe import BfeConfig, BfeModule, bfe_forward, count_tokens, tokenize_generic, tokenize_specific
from bridgenet.gradcheck import check_bfe
from bridgenet.tensor import ConfigError, Rng, ShapeError, Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def make(c=8, cp=8, l=2, d=2, seed=0):
    return BfeModule(BfeConfig(generic_channels=c, specific_channels=cp, attn_dim=c, kv_downsample=l,
                               query_downsample=d), Rng(seed))


def maps(t, c=8, hw=8, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=(1, c, hw, hw))) for _ in range(t)]


def test_config_requires_identity_residual():
    with pytest.raises(ShapeError):
        BfeConfig(generic_channels=8, specific_channels=8, attn_dim=16, kv_downsample=2)


def test_generic_tokenizer_unit_stride_is_flatten():
    m = make(d=1)
    s = maps(1)[0]
    tok = tokenize_generic(m, s).data
    assert np.array_equal(tok, s.data.reshape(1, 8, 64).transpose(0, 2, 1))


def test_generic_tokenizer_shape_and_errors():
    m = make(c=32, cp=32, d=2)
    assert tokenize_generic(m, Tensor(np.zeros((1, 32, 8, 8)))).shape == (1, 16, 32)
    with pytest.raises(ConfigError):
        tokenize_generic(m, Tensor(np.zeros((1, 32, 7, 8))))


def test_specific_tokenizer_shapes_and_ordering():
    m = make(c=32, cp=32, l=4)
    consts = [Tensor(np.full((1, 32, 8, 8), float(j + 1))) for j in range(2)]
    tok = tokenize_specific(m, consts).data
    assert tok.shape == (1, 8, 32)
    assert np.all(tok[:, :4] == 1.0) and np.all(tok[:, 4:] == 2.0)
    one = tokenize_specific(make(l=1), maps(1), l=1).data
    assert np.array_equal(one, maps(1)[0].data.reshape(1, 8, 64).transpose(0, 2, 1))
    with pytest.raises(ShapeError):
        tokenize_specific(m, [Tensor(np.zeros((1, 32, 8, 8))), Tensor(np.zeros((1, 32, 4, 4)))])
    with pytest.raises(ConfigError):
        tokenize_specific(m, [Tensor(np.zeros((1, 32, 6, 6)))])


def test_attention_shape_worked_example():
    m = make(c=8, l=4, d=2)
    out, attn = bfe_forward(m, maps(1)[0], maps(2, seed=1), return_attention=True)
    assert attn.shape[-2:] == (16, 8)
    assert m.cfg.attention_shape(8, 8, 8, 8, 2) == (16, 8)
    assert out.shape == (1, 8, 8, 8)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.integers(1, 4),
       st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_attention_shape_formula_random_configs(d, l, t, a, b, c, e):
    hs, ws, hp, wp = d * a, d * b, l * c, l * e
    m = make(c=4, cp=4, l=l, d=d)
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=(1, 4, hs, ws)))
    ps = [Tensor(rng.normal(size=(1, 4, hp, wp))) for _ in range(t)]
    out, attn = bfe_forward(m, s, ps, return_attention=True)
    expected = m.cfg.attention_shape(hs, ws, hp, wp, t)
    assert attn.shape == (1, 2) + expected
    assert expected == count_tokens(hs, ws, hp, wp, t, d, l)
    assert out.shape == s.shape
    assert np.abs(attn.data.sum(-1) - 1).max() < 1e-6


def test_zero_ffn_output_returns_generic_exactly():
    m = make().zero_outputs_()
    s = maps(1)[0]
    assert np.array_equal(bfe_forward(m, s, maps(2, seed=3)).data, s.data)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        bfe_forward(make(), Tensor(np.zeros((1, 4, 8, 8))), maps(2))


def test_parameter_count_independent_of_task_count():
    m = make()
    n = m.num_parameters()
    for t in (1, 2, 3, 4):
        bfe_forward(m, maps(1)[0], maps(t))
        assert m.num_parameters() == n


def test_task_order_invariance_with_tied_projections():
    m = make()
    s = maps(1)[0]
    ps = maps(3, seed=4)
    a = bfe_forward(m, s, ps).data
    b = bfe_forward(m, s, ps[::-1]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_check():
    assert check_bfe(Rng(6)).passed
