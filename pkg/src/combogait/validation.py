"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError, LabelError, ValidationError

N_CLASSES = (5, 2, 4)  # age, sex, bmi


def check_pair(sil, smpl, height: int, width: int, smpl_dim: int = 82) -> tuple[np.ndarray, np.ndarray]:
    """One (T, H, W) binary mask sequence and its (T, D) SMPL stream, returned as uint8 / float32."""
    sil = np.asarray(sil)
    smpl = np.asarray(smpl, dtype=np.float32)
    if sil.ndim != 3 or sil.shape[1:] != (height, width):
        raise DimensionError(f"silhouettes must be (T, {height}, {width}), got {sil.shape}")
    if smpl.ndim != 2 or smpl.shape[1] != smpl_dim:
        raise DimensionError(f"SMPL parameters must be (T, {smpl_dim}), got {smpl.shape}")
    if sil.shape[0] != smpl.shape[0]:
        raise DataError(f"{sil.shape[0]} silhouette frames vs {smpl.shape[0]} SMPL frames")
    if sil.shape[0] == 0:
        raise DataError("sequence has no frames")
    if not np.isin(sil, (0, 1)).all():
        raise ValidationError("silhouette masks must be binary (0/1)")
    if not np.isfinite(smpl).all():
        raise ValidationError("SMPL parameters must be finite")
    return sil.astype(np.uint8), smpl


def check_pairs(X, height: int, width: int, smpl_dim: int = 82) -> list[tuple[np.ndarray, np.ndarray]]:
    """A non-empty sequence of (silhouettes, smpl) pairs."""
    try:
        items = list(X)
    except TypeError:
        raise ValidationError("X must be an iterable of (silhouettes, smpl) pairs") from None
    if not items:
        raise ValidationError("X is empty")
    out = []
    for i, item in enumerate(items):
        try:
            sil, smpl = item
        except (TypeError, ValueError):
            raise ValidationError(f"X[{i}] is not a (silhouettes, smpl) pair") from None
        out.append(check_pair(sil, smpl, height, width, smpl_dim))
    return out


def check_ids(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DataError(f"y must hold one identity per sequence ({n}), got shape {y.shape}")
    return y


def check_attributes(attributes, n: int) -> np.ndarray:
    """(n, 3) integer classes in (age, sex, bmi) order, each within its class count."""
    a = np.asarray(attributes)
    if a.shape != (n, 3):
        raise DataError(f"attributes must be ({n}, 3), got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.mod(a, 1) == 0):
            raise LabelError("attribute classes must be integers")
        a = a.astype(np.int64)
    for k, (name, n_cls) in enumerate(zip(("age", "sex", "bmi"), N_CLASSES)):
        if a[:, k].min() < 0 or a[:, k].max() >= n_cls:
            raise LabelError(f"{name} classes must lie in [0, {n_cls})")
    return a
