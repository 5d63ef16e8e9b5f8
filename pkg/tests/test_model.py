import numpy as np
import pytest

from combogait.errors import ConfigError, DataError, DimensionError, ValidationError
from combogait.model import ComboGaitModel
from combogait.numerics import Tensor, ops

from conftest import tiny_config, tiny_inputs


class MeanPoolEncoder:
    """A stand-in backbone: 4x4 average pooling replicated over C channels."""

    def __init__(self, channels, hw):
        self.out_channels, self.out_hw = channels, hw

    def __call__(self, x):
        b, t, h, w = x.shape
        y = ops.mean(ops.reshape(x, (b, 1, t, h // 4, 4, w // 4, 4)), axis=(4, 6))
        return ops.broadcast_to(y, (b, self.out_channels, t, h // 4, w // 4))


def test_forward_shapes(rng):
    cfg = tiny_config()
    res = ComboGaitModel(cfg)(*tiny_inputs(rng, 2, 3, cfg))
    assert res.e_sil.shape == (2, 4, 3, 4, 3)
    assert res.e_smpl.shape == (2, 3, 16)
    assert res.e_fused.shape == (2, 4, 3, 4, 4)
    assert res.g_fused.shape == (2, 4, 4, 4)
    assert res.g_tilde.shape == (2, 4, 4)
    assert res.f_gait.shape == (2, 6, 4)
    assert res.tokens.shape == (2, 3, 8)
    assert [t.shape for t in res.logits.as_tuple()] == [(2, 5), (2, 2), (2, 4)]
    assert res.embedding().shape == (2, 24)


def test_embedding_is_row_major_f_gait(rng):
    cfg = tiny_config()
    res = ComboGaitModel(cfg).eval()(*tiny_inputs(rng, 1, 2, cfg))
    f = res.f_gait.data[0]
    assert res.embedding()[0, 1] == f[0, 1] and res.embedding()[0, f.shape[1]] == f[1, 0]


def test_smpl_fusion_off_ignores_smpl(rng):
    cfg = tiny_config(smpl_fusion=False)
    model = ComboGaitModel(cfg).eval()
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    a = model(sil, smpl)
    b = model(sil, smpl * 5 + 1)
    assert a.f_gait.data.tobytes() == b.f_gait.data.tobytes()
    assert a.e_smpl is None


def test_external_encoder(rng):
    cfg = tiny_config(encoder="external")
    enc = MeanPoolEncoder(4, (4, 3))
    res = ComboGaitModel(cfg, enc)(*tiny_inputs(rng, 2, 3, cfg))
    assert res.f_gait.shape == (2, 6, 4)
    with pytest.raises(ConfigError):
        ComboGaitModel(cfg)
    with pytest.raises(ConfigError):
        ComboGaitModel(cfg, MeanPoolEncoder(5, (4, 3)))


@pytest.mark.parametrize(
    "overrides",
    [dict(task_fusion=False), dict(self_attention=False), dict(n_blocks=1), dict(n_blocks=3), dict(n_heads=4), dict(token_dim=16)],
)
def test_ablation_configs_forward(rng, overrides):
    cfg = tiny_config(**overrides)
    res = ComboGaitModel(cfg)(*tiny_inputs(rng, 2, 2, cfg))
    assert [t.shape for t in res.logits.as_tuple()] == [(2, 5), (2, 2), (2, 4)]
    assert (res.tokens is None) == (not cfg.task_fusion)


def test_input_validation(rng):
    cfg = tiny_config()
    model = ComboGaitModel(cfg)
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    with pytest.raises(ValidationError):
        model(sil * 2, smpl)
    with pytest.raises(DimensionError):
        model(sil, smpl[..., :80])
    with pytest.raises(DataError):
        model(sil, smpl[:, :2])


def test_state_dict_roundtrip(rng):
    cfg = tiny_config()
    a, b = ComboGaitModel(cfg), ComboGaitModel(tiny_config(init_seed=99))
    b.load_state_dict(a.state_dict())
    sil, smpl = tiny_inputs(rng, 1, 2, cfg)
    assert a.eval()(sil, smpl).f_gait.data.tobytes() == b.eval()(sil, smpl).f_gait.data.tobytes()


def test_backward_reaches_every_parameter(rng):
    from combogait.numerics import Tape

    cfg = tiny_config()
    model = ComboGaitModel(cfg)
    sil, smpl = tiny_inputs(rng, 2, 3, cfg)
    with Tape() as tape:
        res = model(sil, smpl)
        loss = ops.add(ops.sum(ops.mul(res.f_gait, res.f_gait)), ops.sum(res.logits.age))
        loss = ops.add(loss, ops.add(ops.sum(ops.mul(res.logits.sex, res.logits.sex)), ops.sum(ops.mul(res.logits.bmi, res.logits.bmi))))
        loss = ops.add(loss, ops.sum(model.id_classifier(res.f_gait)))
    tape.backward(loss)
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert missing == []
    assert isinstance(res.f_gait, Tensor)
