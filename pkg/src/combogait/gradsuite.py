"""Gradient oracle suite: every differentiable op, the losses and an end-to-end micro model.

Each case is checked in float64 against central differences; a case
passes when its max relative error is below ``TOLERANCE``.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import LossWeights, ModelConfig
from .model import ComboGaitModel
from .numerics import Tensor, gradcheck, ops

TOLERANCE = 1e-4
# widest float numpy offers here (80-bit extended on x86-64); keeps cancellation noise
# in the central differences far below the tolerance even for near-zero gradients
WIDE = np.longdouble


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable]]:
    """(name, builder) pairs: builder returns (f, inputs) with <= 64 elements."""
    c4 = rng.standard_normal((3, 4))
    labels = rng.integers(0, 4, size=3)

    def bn_case(training):
        x = Tensor(rng.standard_normal((5, 3)))
        g = Tensor(rng.uniform(0.5, 1.5, 3))
        b = Tensor(rng.standard_normal(3))
        w = rng.standard_normal((5, 3))
        rm, rv = rng.standard_normal(3) * 0.1, rng.uniform(0.5, 2, 3)
        return (lambda: ops.sum(ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training) * w)), [x, g, b]

    def conv_case():
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        k = Tensor(rng.standard_normal((2, 2, 3, 3)))
        w = rng.standard_normal((1, 2, 2, 2))
        return (lambda: ops.sum(ops.conv2d(x, k, 2, 1) * w)), [x, k]

    def conv_nhwc_case():
        x = Tensor(rng.standard_normal((2, 4, 3, 2)))
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        bias = Tensor(rng.standard_normal(3))
        w = rng.standard_normal((2, 4, 3, 3))
        return (lambda: ops.sum(ops.conv2d(x, k, 1, 1, bias, channels_last=True) * w)), [x, k, bias]

    def pool_nhwc_case():
        x = Tensor(rng.permutation(32).reshape(1, 4, 4, 2).astype(float))
        w = rng.standard_normal((1, 2, 2, 2))
        return (lambda: ops.sum(ops.max_pool2x2(x, axis=1) * w)), [x]

    def pool_case():
        x = Tensor(rng.permutation(32).reshape(1, 2, 4, 4).astype(float))
        w = rng.standard_normal((1, 2, 2, 2))
        return (lambda: ops.sum(ops.max_pool2x2(x) * w)), [x]

    def dropout_case():
        x = Tensor(rng.standard_normal((4, 4)))
        return (lambda: ops.sum(ops.dropout(x, 0.3, True, np.random.default_rng(9)) * c4[:, :4].sum())), [x]

    def pdist_case():
        x = Tensor(rng.standard_normal((2, 4, 3)))
        w = rng.standard_normal((2, 4, 4))
        return (lambda: ops.sum(ops.pairwise_distance(x) * w)), [x]

    def unary(fn, shape=(3, 4), positive=False):
        def build():
            x = Tensor(rng.uniform(0.5, 2, shape) if positive else rng.standard_normal(shape))
            w = rng.standard_normal(shape)
            return (lambda: ops.sum(fn(x) * w)), [x]

        return build

    def binary(fn, sa, sb):
        def build():
            a, b = Tensor(rng.standard_normal(sa)), Tensor(rng.standard_normal(sb))
            return (lambda: ops.sum(ops.mul(fn(a, b), 1.0))), [a, b]

        return build

    def ln_case():
        x = Tensor(rng.standard_normal((3, 5)))
        g, b = Tensor(rng.uniform(0.5, 1.5, 5)), Tensor(rng.standard_normal(5))
        w = rng.standard_normal((3, 5))
        return (lambda: ops.sum(ops.layer_norm(x, g, b) * w)), [x, g, b]

    def ce_case():
        x = Tensor(rng.standard_normal((3, 4)))
        return (lambda: ops.cross_entropy(x, labels)), [x]

    def take_case():
        x = Tensor(rng.standard_normal((4, 3)))
        w = rng.standard_normal((3, 3))
        return (lambda: ops.sum(ops.take(x, (np.array([0, 2, 2]), slice(None))) * w)), [x]

    def concat_case():
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 2)))
        w = rng.standard_normal((2, 5))
        return (lambda: ops.sum(ops.concat([a, b], axis=1) * w)), [a, b]

    def pad_case():
        x = Tensor(rng.standard_normal((2, 3, 2)))
        w = rng.standard_normal((2, 3, 3))
        return (lambda: ops.sum(ops.pad_last2(x, 0, 1) * w)), [x]

    def bcast_case():
        x = Tensor(rng.standard_normal((2, 1, 3)))
        w = rng.standard_normal((2, 4, 3))
        return (lambda: ops.sum(ops.broadcast_to(x, (2, 4, 3)) * w)), [x]

    return [
        ("add", binary(ops.add, (3, 4), (4,))),
        ("sub", binary(ops.sub, (3, 1), (3, 4))),
        ("mul", binary(ops.mul, (3, 4), (3, 4))),
        ("matmul", binary(ops.matmul, (2, 3, 4), (4, 2))),
        ("bmatmul", binary(ops.matmul, (2, 3, 4), (2, 4, 2))),
        ("scale", unary(lambda t: ops.scale(t, -2.5))),
        ("relu", unary(ops.relu)),
        ("exp", unary(ops.exp)),
        ("log", unary(ops.log, positive=True)),
        ("sqrt", unary(ops.sqrt, positive=True)),
        ("sum", unary(lambda t: ops.sum(t, axis=0))),
        ("mean", unary(lambda t: ops.mean(t, axis=1, keepdims=True))),
        ("max", unary(lambda t: ops.max_over_axis(t, 0))),
        ("reshape", unary(lambda t: ops.reshape(t, (4, 3)), shape=(4, 3))),
        ("transpose", unary(lambda t: ops.transpose(t, (1, 0)), shape=(4, 4))),
        ("softmax", unary(ops.softmax)),
        ("log_softmax", unary(ops.log_softmax)),
        ("layer_norm", ln_case),
        ("cross_entropy", ce_case),
        ("batch_norm_train", lambda: bn_case(True)),
        ("batch_norm_eval", lambda: bn_case(False)),
        ("dropout", dropout_case),
        ("conv2d", conv_case),
        ("conv2d_channels_last", conv_nhwc_case),
        ("max_pool2x2", pool_case),
        ("max_pool2x2_channels_last", pool_nhwc_case),
        ("pairwise_distance", pdist_case),
        ("take", take_case),
        ("concat", concat_case),
        ("pad", pad_case),
        ("broadcast_to", bcast_case),
    ]


def loss_cases(rng: np.random.Generator) -> list[tuple[str, Callable]]:
    """Triplet, identity CE and attribute CE on small random embeddings."""
    from .model import IdentityClassifier
    from .multitask import AttributeLogits
    from .training import attribute_ce, batch_all_triplet, gait_ce

    def triplet_case():
        f = Tensor(rng.standard_normal((4, 3, 2)))
        ids = np.array([0, 0, 1, 1])
        return (lambda: batch_all_triplet(f, ids, margin=2.0)), [f]

    def gait_ce_case():
        f = Tensor(rng.standard_normal((3, 4, 2)))
        clf = IdentityClassifier(2, 4, 5, rng)
        clf.astype(np.float64)
        ids = rng.integers(0, 5, size=3)
        return (lambda: gait_ce(f, ids, clf)), [f, clf.weight]

    def attribute_case():
        heads = [Tensor(rng.standard_normal((3, n))) for n in (5, 2, 4)]
        labels = np.stack([rng.integers(0, n, size=3) for n in (5, 2, 4)], axis=1)
        w = rng.uniform(0.5, 1.5, 3)

        def f():
            a, s, b = attribute_ce(AttributeLogits(*heads), labels)
            return ops.add(ops.add(ops.scale(a, w[0]), ops.scale(s, w[1])), ops.scale(b, w[2]))

        return f, heads

    return [("batch_all_triplet", triplet_case), ("gait_ce", gait_ce_case), ("attribute_ce", attribute_case)]


def micro_config(**overrides) -> ModelConfig:
    """B=2-scale network: C=2, Hmax=4 (16x12 input), M=8, 2 blocks, 2 heads."""
    base = dict(
        height=16,
        width=12,
        sil_channels=(2, 2, 2),
        smpl_hidden=(8, 8),
        smpl_embed=16,
        token_dim=8,
        n_heads=2,
        n_blocks=2,
        gait_dim=4,
        direct_hidden=4,
        n_train_ids=2,
        init_seed=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_model_case(seed: int = 0, batch: int = 2, frames: int = 2, dtype=WIDE, weights=None, **overrides):
    """Combo loss of the full model w.r.t. every parameter and the SMPL input."""
    from .training import LossTerms, attribute_ce, batch_all_triplet, combo_loss, gait_ce

    cfg = micro_config(**overrides)
    model = ComboGaitModel(cfg).astype(dtype)
    rng = np.random.default_rng(seed)
    sil = (rng.random((batch, frames, cfg.height, cfg.width)) > 0.5).astype(np.uint8)
    smpl = Tensor(rng.standard_normal((batch, frames, cfg.smpl_dim)).astype(dtype))
    ids = np.arange(batch) % cfg.n_train_ids if batch <= cfg.n_train_ids else np.repeat(np.arange(cfg.n_train_ids), batch // cfg.n_train_ids)
    labels = np.stack([rng.integers(0, n, size=batch) for n in (cfg.n_age, cfg.n_sex, cfg.n_bmi)], axis=1)
    weights = weights or LossWeights(1.0, 1.0, 0.5, 0.5, 0.5)

    def f():
        res = model(sil, smpl, np.random.default_rng(seed + 100))
        age, sex, bmi = attribute_ce(res.logits, labels)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            tri = batch_all_triplet(res.f_gait, ids, margin=5.0)
        return combo_loss(LossTerms(tri, gait_ce(res.f_gait, ids, model.id_classifier), age, sex, bmi), weights)

    return f, [*model.parameters(), smpl]


@dataclass
class SuiteResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def run_suite(seeds=range(10), include_model: bool = True, log: Callable[[str], None] | None = None) -> list[SuiteResult]:
    """Worst relative error per op over ``seeds``, then the end-to-end micro models."""
    results = []
    names = [n for n, _ in op_cases(np.random.default_rng(0)) + loss_cases(np.random.default_rng(0))]
    for name in names:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            builder = dict(op_cases(np.random.default_rng(seed)) + loss_cases(np.random.default_rng(seed)))[name]
            f, inputs = builder()
            for x in inputs:
                x.data = x.data.astype(WIDE)
            worst = max(worst, gradcheck(f, inputs))
        results.append(SuiteResult(name, worst, time.perf_counter() - t0))
        if log:
            log(f"{name:28s} {worst:.2e}")
    if include_model:
        for name, kwargs in (("model_micro_b2", {}), ("model_micro_b4_triplet", {"batch": 4})):
            t0 = time.perf_counter()
            f, inputs = micro_model_case(**kwargs)
            err = gradcheck(f, inputs)
            results.append(SuiteResult(name, err, time.perf_counter() - t0))
            if log:
                log(f"{name:28s} {err:.2e}")
    return results
