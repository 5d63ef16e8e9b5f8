"""Silhouette and SMPL encoders.

The silhouette side is pluggable: anything implementing
:class:`SilhouetteEncoder` can replace the reference CNN as long as it maps
(B, T, H, W) masks to (B, C, T, H', W') features.
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .config import ModelConfig
from .errors import DimensionError, ValidationError
from .nn import BatchNorm, Conv2d, Linear, Module
from .numerics import Tensor, ops


@runtime_checkable
class SilhouetteEncoder(Protocol):
    out_channels: int
    out_hw: tuple[int, int]

    def __call__(self, x: Tensor) -> Tensor: ...


def check_silhouettes(x, height: int, width: int) -> np.ndarray:
    """Validate a (B, T, H, W) batch of binary masks and return it as an array."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim != 4 or arr.shape[2:] != (height, width):
        raise DimensionError(f"silhouettes must be (B, T, {height}, {width}), got {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("silhouette masks must contain only 0 and 1")
    return arr


class ReferenceCNN(Module):
    """Three conv3x3 -> BN -> ReLU blocks; blocks 1 and 2 end in 2x2 max-pool.

    Frames are folded into the batch axis, so the time axis is never mixed.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2, c3 = cfg.sil_channels
        # activations are kept channels-last internally; only the output is (B, C, T, H', W')
        mom, eps = cfg.bn_momentum, cfg.bn_eps
        self.conv1, self.bn1 = Conv2d(1, c1, 3, rng, 1, True), BatchNorm(c1, -1, mom, eps)
        self.conv2, self.bn2 = Conv2d(c1, c2, 3, rng, 1, True), BatchNorm(c2, -1, mom, eps)
        self.conv3, self.bn3 = Conv2d(c2, c3, 3, rng, 1, True), BatchNorm(c3, -1, mom, eps)
        self.out_channels = c3
        self.out_hw = cfg.feature_hw
        self.in_hw = (cfg.height, cfg.width)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        b, t, h, w = x.shape
        if (h, w) != self.in_hw:
            raise DimensionError(f"silhouettes must be {self.in_hw}, got {(h, w)}")
        y = ops.reshape(x, (b * t, h, w, 1))
        # relu commutes with max-pool; pooling first runs relu on a quarter of the values
        y = ops.relu(ops.max_pool2x2(self.bn1(self.conv1(y)), axis=1))
        y = ops.relu(ops.max_pool2x2(self.bn2(self.conv2(y)), axis=1))
        y = ops.relu(self.bn3(self.conv3(y)))
        _, hh, ww, c = y.shape
        return ops.transpose(ops.reshape(y, (b, t, hh, ww, c)), (0, 4, 1, 2, 3))


class SmplEncoder(Module):
    """FC -> BN -> ReLU -> dropout, twice, then a final FC to the embedding.

    Batch-norm statistics pool over all B*T frame vectors.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims = (cfg.smpl_dim, *cfg.smpl_hidden)
        self.fcs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.bns = [BatchNorm(d, 1, cfg.bn_momentum, cfg.bn_eps) for d in dims[1:]]
        self.out = Linear(dims[-1], cfg.smpl_embed, rng)
        self.dropout = cfg.smpl_dropout
        self.in_dim = cfg.smpl_dim

    def __call__(self, y, rng: np.random.Generator | None = None) -> Tensor:
        y = y if isinstance(y, Tensor) else Tensor(y)
        if y.ndim != 3 or y.shape[-1] != self.in_dim:
            raise DimensionError(f"SMPL input must be (B, T, {self.in_dim}), got {y.shape}")
        b, t, d = y.shape
        h = ops.reshape(y, (b * t, d))
        for fc, bn in zip(self.fcs, self.bns):
            h = ops.dropout(ops.relu(bn(fc(h))), self.dropout, self.training, rng)
        h = self.out(h)
        return ops.reshape(h, (b, t, h.shape[-1]))


def encode_silhouettes(x, encoder: SilhouetteEncoder, cfg: ModelConfig | None = None) -> Tensor:
    """Validate masks then run the encoder; returns (B, C, T, H', W')."""
    if cfg is not None:
        check_silhouettes(x, cfg.height, cfg.width)
    return encoder(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32)))


def encode_smpl(y, encoder: SmplEncoder, rng: np.random.Generator | None = None) -> Tensor:
    return encoder(y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float32)), rng)
