"""Silhouette/SMPL fusion: pad to square, reshape, broadcast, ``S @ (I + M)``, pool over time."""
from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError
from .numerics import Tensor, as_tensor, ops


def pad_to_square(e) -> Tensor:
    """Zero-pad (..., H', W') on the right/bottom to (..., Hmax, Hmax)."""
    e = as_tensor(e)
    h, w = e.shape[-2:]
    hmax = max(h, w)
    return ops.pad_last2(e, hmax - h, hmax - w)


def smpl_to_matrix(e, hmax: int) -> Tensor:
    """(B, T, D') -> (B, 1, T, Hmax, Hmax), row-major per frame."""
    e = as_tensor(e)
    b, t, d = e.shape
    if d != hmax * hmax:
        raise DimensionError(
            f"SMPL embedding of size {d} cannot form a {hmax}x{hmax} fusion matrix ({hmax * hmax} != {d})"
        )
    return ops.reshape(e, (b, 1, t, hmax, hmax))


def broadcast_channels(m, channels: int) -> Tensor:
    m = as_tensor(m)
    if m.shape[1] == channels:
        return m
    return ops.broadcast_to(m, (m.shape[0], channels, *m.shape[2:]))


def fuse(s, m) -> Tensor:
    """Per (b, c, t) slice: ``S @ (I + M)``, silhouette on the left.

    ``m`` may keep a unit channel axis; matmul then repeats it logically
    across channels, which is what :func:`broadcast_channels` would do.
    """
    s, m = as_tensor(s), as_tensor(m)
    if s.shape[-1] != s.shape[-2] or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"fusion needs square trailing dims, got {s.shape} and {m.shape}")
    if s.shape[-1] != m.shape[-1] or (m.ndim == 5 and m.shape[1] not in (1, s.shape[1])):
        raise DimensionError(f"fusion operands differ: {s.shape} vs {m.shape}")
    eye = np.eye(s.shape[-1], dtype=m.dtype)
    return ops.matmul(s, ops.add(m, eye))


def temporal_pool(e) -> Tensor:
    """Max over the time axis of (B, C, T, H, W)."""
    e = as_tensor(e)
    if e.shape[2] == 0:
        raise DataError("temporal pooling needs at least one frame")
    return ops.max_over_axis(e, axis=2)
