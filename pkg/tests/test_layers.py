import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stl_forecast import autodiff as ad
from stl_forecast import oracles
from stl_forecast.autodiff import Rng, constant, grad_check, parameter
from stl_forecast.errors import DataError, DimensionError
from stl_forecast.layers import (
    DateTimeEmbedding,
    DynamicCoder,
    Linear,
    ResLBlock,
    minmax_normalize,
    positional_encoding,
    res_l_forward,
    spatial_attention_forward,
)

COMPS = ("month", "date", "weekday", "hour")


def set_param(t, value):
    arr = np.array(value, dtype=np.float64).reshape(t.shape)
    arr.setflags(write=False)
    t.data = arr


def zero_block(block):
    for p in block.parameters().values():
        set_param(p, np.zeros(p.shape))


# -- Linear ---------------------------------------------------------------


def test_linear_identity_and_constant():
    lin = Linear(3, 3, Rng(0))
    set_param(lin.weight, np.eye(3))
    set_param(lin.bias, np.zeros(3))
    x = constant(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(lin(x).data, x.data)
    set_param(lin.weight, np.zeros((3, 3)))
    set_param(lin.bias, [2.5, 2.5, 2.5])
    assert np.all(lin(x).data == 2.5)


def test_linear_hand_value():
    lin = Linear(2, 1, Rng(0))
    set_param(lin.weight, [[1.0, 1.0]])
    set_param(lin.bias, [0.5])
    assert lin(constant([[1.0, 2.0]])).data.tolist() == [[3.5]]


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        Linear(3, 2, Rng(0))(constant(np.ones((2, 4))))


def test_linear_init_bounds_and_shapes():
    lin = Linear(16, 5, Rng(1))
    assert lin.weight.shape == (5, 16) and lin.bias.shape == (5,)
    assert np.all(np.abs(lin.weight.data) <= 1 / math.sqrt(16))
    assert np.all(np.abs(lin.bias.data) <= 1 / math.sqrt(16))


def test_linear_per_channel_weights_are_independent():
    lin = Linear(3, 2, Rng(2), channels=2)
    assert lin.weight.shape == (2, 2, 3)
    x = np.random.default_rng(0).normal(size=(4, 2, 3))
    out = lin(constant(x)).data
    for c in range(2):
        np.testing.assert_allclose(out[:, c], x[:, c] @ lin.weight.data[c].T + lin.bias.data[c], atol=1e-14)


def test_linear_matches_oracle():
    lin = Linear(4, 3, Rng(3))
    x = np.random.default_rng(1).normal(size=(2, 5, 4))
    np.testing.assert_allclose(lin(constant(x)).data, oracles.linear(x, lin.weight.data, lin.bias.data), atol=1e-12)


# -- Res-L ----------------------------------------------------------------


def test_res_l_zero_weights_zero_output():
    blk = ResLBlock(3, 2, Rng(0))
    zero_block(blk)
    assert np.all(blk(constant(np.ones((2, 3)))).data == 0)


def test_res_l_skip_isolation():
    blk = ResLBlock(3, 3, Rng(0))
    zero_block(blk)
    set_param(blk.l1.weight, np.eye(3))
    x = constant(np.random.default_rng(2).normal(size=(2, 3)))
    np.testing.assert_array_equal(blk(x).data, x.data)


@pytest.mark.parametrize("act", ["silu", "leaky_relu"])
def test_res_l_matches_oracle(act):
    blk = ResLBlock(3, 4, Rng(7), act)
    x = np.random.default_rng(3).normal(size=(2, 3))
    p = {n: (getattr(blk, n).weight.data, getattr(blk, n).bias.data) for n in ("l1", "l2", "l3")}
    np.testing.assert_allclose(blk(constant(x)).data, oracles.res_l(x, p, act), atol=1e-12)


def test_res_l_output_dims_summable():
    blk = ResLBlock(7, 5, Rng(0))
    assert blk.l1.out_dim == blk.l3.out_dim == 5
    assert blk.l2.out_dim == blk.l3.in_dim


def test_res_l_dropout_only_in_training():
    blk = ResLBlock(6, 6, Rng(0), dropout_p=0.5)
    x = constant(np.random.default_rng(0).normal(size=(3, 6)))
    np.testing.assert_array_equal(blk(x).data, blk(x, training=False, rng=Rng(1)).data)
    assert not np.array_equal(blk(x).data, blk(x, training=True, rng=Rng(1)).data)


def test_res_l_gradients():
    blk = ResLBlock(5, 4, Rng(3), "silu")
    x = parameter(np.random.default_rng(4).uniform(-2, 2, (3, 5)))
    ps = list(blk.parameters().values())
    rep = grad_check(lambda x, *p: ad.sum(ad.tanh(res_l_forward(blk, x))), [x] + ps)
    assert rep.passed, rep


# -- positional encoding --------------------------------------------------


def test_pe_examples():
    pe = positional_encoding(4, 5)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0])
    assert positional_encoding(2, 2)[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert positional_encoding(2, 2)[1, 0] == pytest.approx(0.8414709848078965, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9))
def test_pe_matches_oracle_and_is_deterministic(T, C):
    pe = positional_encoding(T, C)
    assert pe.shape == (T, C)
    assert np.all(np.abs(pe) <= 1)
    np.testing.assert_array_equal(pe, positional_encoding(T, C))
    np.testing.assert_allclose(pe, oracles.positional_encoding(T, C), atol=1e-12)


def test_pe_odd_last_column_is_sin():
    pe = positional_encoding(6, 3)
    p = np.arange(6)
    np.testing.assert_allclose(pe[:, 2], np.sin(p / 10000 ** (2 / 3)), atol=1e-15)


# -- datetime features ----------------------------------------------------


def random_stamps(rng, L, comps=COMPS):
    from stl_forecast.layers import COMPONENT_CARDINALITY

    return np.stack([rng.integers(0, COMPONENT_CARDINALITY[c], L) for c in comps], axis=-1)


def test_datetime_constant_reducer():
    emb = DateTimeEmbedding(COMPS, Rng(0))
    set_param(emb.reducer.weight, np.zeros(emb.reducer.weight.shape))
    set_param(emb.reducer.bias, [0.3])
    out = emb(random_stamps(np.random.default_rng(0), 5))
    assert out.shape == (5, 1)
    np.testing.assert_array_equal(out.data, np.full((5, 1), 0.3))


def test_datetime_equal_stamps_equal_outputs():
    emb = DateTimeEmbedding(COMPS, Rng(0))
    st_ = np.array([[6, 0, 4, 10], [6, 0, 4, 10]])
    out = emb(st_).data
    assert out[0, 0] == out[1, 0]


def test_datetime_matches_oracle():
    rng = np.random.default_rng(5)
    emb = DateTimeEmbedding(COMPS, Rng(1))
    for name in COMPS:
        set_param(emb.tables[name], rng.normal(size=emb.tables[name].shape))
    stamps = random_stamps(rng, 3)
    tables = {c: emb.tables[c].data for c in COMPS}
    want = oracles.datetime_features(tables, emb.reducer.weight.data, emb.reducer.bias.data, stamps, COMPS)
    np.testing.assert_allclose(emb(stamps).data[:, 0], want, atol=1e-12)


def test_datetime_out_of_range_names_component():
    emb = DateTimeEmbedding(COMPS, Rng(0))
    with pytest.raises(DataError, match="weekday"):
        emb(np.array([[0, 0, 7, 0]]))
    with pytest.raises(DataError, match="hour"):
        emb(np.array([[0, 0, 0, -1]]))


def test_datetime_table_storage_order_irrelevant():
    emb = DateTimeEmbedding(COMPS, Rng(0))
    stamps = random_stamps(np.random.default_rng(1), 6)
    before = emb(stamps).data.copy()
    emb.tables = dict(reversed(list(emb.tables.items())))
    np.testing.assert_array_equal(emb(stamps).data, before)


def test_datetime_batched_shape():
    emb = DateTimeEmbedding(COMPS, Rng(0))
    rng = np.random.default_rng(2)
    stamps = np.stack([random_stamps(rng, 4), random_stamps(rng, 4)])
    out = emb(stamps)
    assert out.shape == (2, 4)
    np.testing.assert_allclose(out.data[1], emb(stamps[1]).data[:, 0], atol=1e-15)


def test_datetime_embedding_init():
    emb = DateTimeEmbedding(("hour",), Rng(0))
    assert emb.tables["hour"].shape == (24, 8)
    assert emb.reducer.weight.shape == (1, 8)
    assert abs(emb.tables["hour"].data.std() - 0.02) < 0.01


# -- minmax ---------------------------------------------------------------


@pytest.mark.parametrize(
    "x, want",
    [([1, 2, 3], [0, 0.5, 1]), ([5, 5, 5], [0, 0, 0]), ([-1, 0, 3], [0, 0.25, 1])],
)
def test_minmax_examples(x, want):
    np.testing.assert_allclose(minmax_normalize(constant(np.array(x, float))).data, want, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)))
def test_minmax_range_and_oracle(x):
    out = minmax_normalize(constant(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    for r in range(3):
        np.testing.assert_allclose(out[r], oracles.minmax(x[r]), atol=1e-12)


# -- dynamic coder --------------------------------------------------------


def make_coder(seed=0, L=5, h=4):
    emb = DateTimeEmbedding(COMPS, Rng(seed).spawn("e"))
    return DynamicCoder(L, h, emb, Rng(seed).spawn("c"))


def test_coder_gate_off_equals_inner_bitwise():
    coder = make_coder()
    set_param(coder.m, [0.0])
    x = constant(np.random.default_rng(0).normal(size=(3, 5)))
    stamps = random_stamps(np.random.default_rng(1), 5)
    np.testing.assert_array_equal(coder(x, stamps).data, res_l_forward(coder.inner, x).data)


def test_coder_constant_stamps_same_as_gate_off():
    coder = make_coder()
    x = constant(np.random.default_rng(0).normal(size=(3, 5)))
    stamps = np.tile([[6, 0, 4, 10]], (5, 1))
    np.testing.assert_array_equal(coder(x, stamps).data, res_l_forward(coder.inner, x).data)


def test_coder_matches_oracle():
    coder = make_coder(L=2, h=3)
    set_param(coder.m, [1.0])
    emb = coder.dt_embed
    x = np.random.default_rng(0).normal(size=(2, 2))
    stamps = np.array([[0, 0, 0, 0], [1, 2, 3, 4]])
    tables = {c: emb.tables[c].data for c in COMPS}
    f = oracles.minmax(oracles.datetime_features(tables, emb.reducer.weight.data, emb.reducer.bias.data, stamps, COMPS))
    p = {n: (getattr(coder.inner, n).weight.data, getattr(coder.inner, n).bias.data) for n in ("l1", "l2", "l3")}
    want = oracles.res_l(x + f[None, :], p)
    np.testing.assert_allclose(coder(constant(x), stamps).data, want, atol=1e-12)


def test_coder_length_mismatch():
    coder = make_coder()
    with pytest.raises(DimensionError):
        coder(constant(np.ones((3, 5))), random_stamps(np.random.default_rng(0), 4))


def test_coder_gate_is_single_scalar():
    coder = make_coder()
    assert coder.m.shape == (1,)
    assert "m" in coder.parameters()
    assert not any(k.startswith("dt_embed") for k in coder.parameters())


def test_coder_gradients():
    coder = make_coder(L=4, h=3)
    x = parameter(np.random.default_rng(0).uniform(-2, 2, (2, 2, 4)))
    rng = np.random.default_rng(1)
    stamps = np.stack([random_stamps(rng, 4), random_stamps(rng, 4)])
    ps = list(coder.parameters().values()) + list(coder.dt_embed.parameters().values())
    assert grad_check(lambda x, *p: ad.sum(ad.tanh(coder(x, stamps))), [x] + ps).passed


# -- spatial attention ----------------------------------------------------


def test_attention_single_channel_doubles():
    x = np.random.default_rng(0).normal(size=(1, 5))
    np.testing.assert_allclose(spatial_attention_forward(constant(x)).data, 2 * x, atol=1e-15)


def test_attention_zero_input():
    assert np.all(spatial_attention_forward(constant(np.zeros((3, 4)))).data == 0)


def test_attention_matches_double_loop():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(spatial_attention_forward(constant(x)).data, oracles.spatial_attention(x), atol=1e-12)
    np.testing.assert_allclose(
        spatial_attention_forward(constant(x), "cols").data, oracles.spatial_attention(x, "cols"), atol=1e-12
    )


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)), st.permutations(range(4)))
def test_attention_channel_equivariance(x, perm):
    perm = list(perm)
    out = spatial_attention_forward(constant(x)).data
    np.testing.assert_allclose(spatial_attention_forward(constant(x[perm])).data, out[perm], atol=1e-12)
    s = np.tanh(x)
    w = ad.softmax(constant(s @ s.T), -1).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_attention_gradients():
    x = parameter(np.random.default_rng(2).uniform(-2, 2, (2, 3, 4)))
    assert grad_check(lambda x: ad.sum(ad.tanh(spatial_attention_forward(x))), x).passed
