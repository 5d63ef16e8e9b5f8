"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor, backward


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.result_type(x.data, np.float64))
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f())
        flat[i] = orig - h
        fm = _scalar(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def _scalar(t: Tensor):
    # kept as a numpy scalar so extended precision survives the difference
    if t.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {t.shape}")
    return t.data.reshape(-1)[0]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in xs:
        x.requires_grad = True
        x.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    backward(loss, tape)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def gradcheck(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-4,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` is re-evaluated with no arguments, so it must close over ``x`` and
    be deterministic (reseed any dropout generator inside ``f``). Inputs
    should be float64 or wider; the error is taken coordinate-wise as
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    analytic = analytic_grads(f, xs)
    worst = 0.0
    for xi, ai in zip(xs, analytic):
        worst = max(worst, relative_error(ai, numeric_grad(f, xi, h)))
    return worst
