import numpy as np
import pytest

from combogait.config import ModelConfig
from combogait.errors import ConfigError
from combogait.gradsuite import WIDE
from combogait.model import ComboGaitModel
from combogait.multitask import (
    AttributeHeads,
    DirectAttributeHeads,
    FusionBlock,
    GaitHead,
    direct_attribute_heads,
    gait_tokens,
    hpp,
    init_task_tokens,
    run_blocks,
)
from combogait.numerics import Tensor, gradcheck, ops

from conftest import tiny_config, tiny_inputs


def wide_block(rng, dim=4, c=4, heads=1):
    return FusionBlock(dim, c, heads, rng).astype(np.float64)


def layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def lin(layer, x):
    return x @ layer.weight.data + layer.bias.data


# ------------------------------------------------------------------ tokens


def test_task_tokens_shape_and_trainable(rng):
    t = init_task_tokens(3, 512, 0.02, rng)
    assert t.shape == (3, 512) and t.requires_grad


def test_task_tokens_zero_sigma(rng):
    assert not init_task_tokens(3, 8, 0.0, rng).data.any()


def test_task_tokens_statistics():
    t = init_task_tokens(1, 10_000, 0.02, np.random.default_rng(0)).data
    assert abs(t.std() - 0.02) < 0.05 * 0.02
    assert abs(t.mean()) < 0.02 * 4 / 100


def test_gait_tokens_layout():
    g = np.arange(1, 9, dtype=np.float64).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(gait_tokens(g).data[0], [[1, 5], [2, 6], [3, 7], [4, 8]])
    assert gait_tokens(np.zeros((8, 512, 16, 16))).shape == (8, 256, 512)


def test_gait_tokens_roundtrip(rng):
    g = rng.standard_normal((2, 3, 4, 4))
    toks = gait_tokens(g).data
    np.testing.assert_array_equal(toks.transpose(0, 2, 1).reshape(g.shape), g)


# ------------------------------------------------------------------ attention


def test_self_attention_single_token(rng):
    blk = wide_block(rng)
    tok = rng.standard_normal((2, 1, 4))
    trace = []
    out = blk.self_attention(Tensor(tok), trace).data
    assert np.all(trace[0][1] == 1.0)
    expected = layer_norm(tok + lin(blk.sa_o, lin(blk.sa_v, tok)))
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)


def test_self_attention_identical_tokens(rng):
    blk = wide_block(rng, heads=2)
    tok = np.repeat(rng.standard_normal((1, 1, 4)), 3, axis=1)
    out = blk.self_attention(Tensor(tok)).data
    np.testing.assert_allclose(out[:, 1:], np.broadcast_to(out[:, :1], (1, 2, 4)), rtol=0, atol=1e-12)


def test_self_attention_single_head_oracle(rng):
    blk = wide_block(rng)
    tok = rng.standard_normal((2, 3, 4))
    q, k, v = lin(blk.sa_q, tok), lin(blk.sa_k, tok), lin(blk.sa_v, tok)
    w = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(4))
    expected = layer_norm(tok + lin(blk.sa_o, w @ v))
    np.testing.assert_allclose(blk.self_attention(Tensor(tok)).data, expected, rtol=0, atol=1e-6)


def test_head_divisibility(rng):
    blk = FusionBlock(6, 4, 4, rng)
    with pytest.raises(ConfigError):
        blk.self_attention(Tensor(np.zeros((1, 3, 6), dtype=np.float32)))
    with pytest.raises(ConfigError):
        ModelConfig(token_dim=6, n_heads=4).validate()


def test_cross_attention_single_gait_token(rng):
    blk = wide_block(rng, heads=2)
    tok, gait = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 1, 4))
    trace = []
    out = blk.cross_attention(Tensor(tok), Tensor(gait), trace).data
    assert np.all(trace[0][1] == 1.0)
    expected = layer_norm(tok + lin(blk.ca_o, np.repeat(lin(blk.ca_v, gait), 3, axis=1)))
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)


def test_cross_attention_duplication_invariance(rng):
    blk = wide_block(rng, c=5, heads=2)
    tok, gait = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 6, 5))
    once = blk.cross_attention(Tensor(tok), Tensor(gait)).data
    twice = blk.cross_attention(Tensor(tok), Tensor(np.concatenate([gait, gait], axis=1))).data
    np.testing.assert_allclose(once, twice, rtol=0, atol=1e-6)


def test_cross_attention_single_head_oracle(rng):
    blk = wide_block(rng, c=5)
    tok, gait = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 7, 5))
    q, k, v = lin(blk.ca_q, tok), lin(blk.ca_k, gait), lin(blk.ca_v, gait)
    expected = layer_norm(tok + lin(blk.ca_o, softmax(q @ k.transpose(0, 2, 1) / 2.0) @ v))
    np.testing.assert_allclose(blk.cross_attention(Tensor(tok), Tensor(gait)).data, expected, rtol=0, atol=1e-6)


def test_cross_attention_paper_shape():
    blk = FusionBlock(512, 512, 4, np.random.default_rng(0))
    out = blk.cross_attention(Tensor(np.zeros((8, 3, 512), np.float32)), Tensor(np.ones((8, 256, 512), np.float32)))
    assert out.shape == (8, 3, 512)


def test_token_mlp_zero_weights(rng):
    blk = wide_block(rng)
    for layer in (blk.mlp1, blk.mlp2):
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    tok = rng.standard_normal((2, 3, 4))
    np.testing.assert_allclose(blk.token_mlp(Tensor(tok)).data, layer_norm(tok), rtol=0, atol=1e-12)


def test_token_mlp_hand_set_m2(rng):
    blk = wide_block(rng, dim=2)
    blk.mlp1.weight.data[:] = [[1.0, -1.0], [2.0, 0.5]]
    blk.mlp1.bias.data[:] = [0.0, 1.0]
    blk.mlp2.weight.data[:] = [[0.5, 0.0], [1.0, -2.0]]
    blk.mlp2.bias.data[:] = [0.25, 0.0]
    # x = (1, 2): mlp1 -> (5, 1), relu keeps it; mlp2 -> (3.75, -2); residual (4.75, 0)
    out = blk.token_mlp(Tensor(np.array([[[1.0, 2.0]]]))).data[0, 0]
    # two-element layer norm: mean 2.375, deviation +-2.375
    scale = 2.375 / np.sqrt(2.375**2 + 1e-5)
    np.testing.assert_allclose(out, [scale, -scale], rtol=0, atol=1e-12)


def test_run_blocks_shapes_and_errors(rng):
    for n in (1, 2, 3):
        blocks = [FusionBlock(8, 4, 2, rng) for _ in range(n)]
        out = run_blocks(Tensor(np.zeros((2, 3, 8), np.float32)), Tensor(np.ones((2, 5, 4), np.float32)), blocks)
        assert out.shape == (2, 3, 8)
    with pytest.raises(ConfigError):
        run_blocks(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((1, 5, 4))), [])


def test_null_value_path_reduces_block(rng):
    blk = wide_block(rng, heads=2)
    blk.ca_v.weight.data[:] = 0
    blk.ca_v.bias.data[:] = 0
    tok, gait = rng.standard_normal((2, 3, 4)), np.zeros((2, 5, 4))
    full = blk(Tensor(tok), Tensor(gait)).data
    t = blk.self_attention(Tensor(tok)).data
    t = layer_norm(t + blk.ca_o.bias.data)
    expected = blk.token_mlp(Tensor(t)).data
    np.testing.assert_allclose(full, expected, rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    cfg = tiny_config(n_blocks=3)
    model = ComboGaitModel(cfg).eval()
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    res = model(sil, smpl, keep_attention=True)
    assert len(res.attention) == 6
    for _, w in res.attention:
        np.testing.assert_allclose(w.sum(-1), 1.0, rtol=0, atol=1e-6)


def test_run_blocks_deterministic_eval(rng):
    cfg = tiny_config()
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    a = ComboGaitModel(cfg).eval()(sil, smpl).tokens.data
    b = ComboGaitModel(cfg).eval()(sil, smpl).tokens.data
    assert a.tobytes() == b.tobytes()


def test_zero_value_projection_isolates_logits(rng):
    cfg = tiny_config()
    model = ComboGaitModel(cfg).eval()
    for blk in model.blocks:
        blk.ca_v.weight.data[:] = 0
        blk.ca_v.bias.data[:] = 0
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    sil2, smpl2 = tiny_inputs(np.random.default_rng(99), 2, 3, cfg)
    a, b = model(sil, smpl).logits, model(sil2, smpl2).logits
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        assert x.data.tobytes() == y.data.tobytes()
    # the gait embedding still reacts to the inputs
    assert not np.array_equal(model(sil, smpl).f_gait.data, model(sil2, smpl2).f_gait.data)


def test_fusion_block_gradcheck(rng):
    blk = FusionBlock(8, 4, 2, rng).astype(WIDE)
    tok = Tensor(rng.standard_normal((2, 3, 8)).astype(WIDE))
    gait = Tensor(rng.standard_normal((2, 4, 4)).astype(WIDE))
    w = rng.standard_normal((2, 3, 8)).astype(WIDE)

    def f():
        return ops.sum(ops.mul(blk(tok, gait), w))

    assert gradcheck(f, blk.parameters() + [tok, gait]) < 1e-4


# ------------------------------------------------------------------ pooling and heads


def test_hpp_shapes_and_constant():
    assert hpp(np.zeros((8, 512, 16, 16), np.float32)).shape == (8, 512, 16)
    np.testing.assert_allclose(hpp(np.full((1, 2, 4, 4), 1.5)).data, 3.0)


def test_hpp_loop_oracle(rng):
    g = rng.standard_normal((1, 1, 4, 4))
    oracle = [max(g[0, 0, r]) + sum(g[0, 0, r]) / 4 for r in range(4)]
    np.testing.assert_allclose(hpp(g).data[0, 0], oracle, rtol=0, atol=1e-12)


def test_gait_head_shape_identity_and_independence(rng):
    head = GaitHead(16, 512, 256, rng)
    assert head(np.zeros((8, 512, 16), np.float32)).shape == (8, 256, 16)
    sq = GaitHead(4, 3, 3, rng).astype(np.float64)
    sq.weight.data[:] = np.eye(3)
    g = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(sq(g).data, g)
    small = GaitHead(4, 3, 2, rng).astype(np.float64)
    g2 = g.copy()
    g2[:, :, 3] += 1.0
    changed = np.any(small(g).data != small(g2).data, axis=(0, 1))
    assert changed.tolist() == [False, False, False, True]


def test_attribute_heads_shapes_zero_and_wiring(rng):
    heads = AttributeHeads(512, (5, 2, 4), rng)
    out = heads(np.zeros((8, 3, 512), np.float32))
    assert [t.shape for t in out.as_tuple()] == [(8, 5), (8, 2), (8, 4)]
    small = AttributeHeads(4, (5, 2, 4), rng).astype(np.float64)
    for layer in (small.age, small.sex, small.bmi):
        layer.weight.data[:] = 0
    tok = rng.standard_normal((2, 3, 4))
    for layer, t in zip((small.age, small.sex, small.bmi), small(tok).as_tuple()):
        np.testing.assert_array_equal(t.data, np.broadcast_to(layer.bias.data, t.shape))
    small = AttributeHeads(4, (5, 4, 4), rng).astype(np.float64)
    swapped = tok[:, [0, 2, 1]]
    a, b = small(tok), small(swapped)
    assert np.array_equal(a.age.data, b.age.data)
    assert not np.array_equal(a.sex.data, b.sex.data)
    assert not np.array_equal(a.bmi.data, b.bmi.data)


def test_direct_heads(rng):
    cfg = ModelConfig(task_fusion=False)
    heads = DirectAttributeHeads(512 * 16, 32, (5, 2, 4), rng)
    out = direct_attribute_heads(rng.standard_normal((8, 512, 16)).astype(np.float32), heads, cfg)
    assert [t.shape for t in out.as_tuple()] == [(8, 5), (8, 2), (8, 4)]
    zero = direct_attribute_heads(np.zeros((8, 512, 16), np.float32), heads, cfg)
    assert all(not t.data.any() for t in zero.as_tuple())
    with pytest.raises(ConfigError):
        direct_attribute_heads(np.zeros((8, 512, 16)), heads, ModelConfig())
