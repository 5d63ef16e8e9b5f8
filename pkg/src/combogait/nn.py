"""Parameter containers built on the tensor core."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import Tensor, ops


class Module:
    """Base class that discovers parameters, buffers and children by attribute walk.

    Parameters are Tensors with ``requires_grad``; buffers are plain numpy
    arrays (batch-norm running statistics). Names are dotted attribute paths,
    with list children indexed by position.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise KeyError(f"unexpected state entry {name!r}")
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self._modules_recursive():
            for name, value in list(vars(mod).items()):
                if isinstance(value, np.ndarray):
                    setattr(mod, name, value.astype(dtype))
        return self

    def _modules_recursive(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child._modules_recursive()


def _param(arr: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ W + b`` with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _param(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self, c_in: int, c_out: int, k: int, rng: np.random.Generator, padding: int = 0, channels_last: bool = False
    ):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng.standard_normal((c_out, c_in, k, k)) * std)
        self.bias = _param(np.zeros(c_out))
        self.padding = padding
        self.channels_last = channels_last

    def __call__(self, x):
        return ops.conv2d(x, self.weight, 1, self.padding, self.bias, self.channels_last)


class BatchNorm(Module):
    """Batch norm over every axis except ``axis``; momentum 0.9 on running stats."""

    def __init__(self, n: int, axis: int = 1, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = _param(np.ones(n))
        self.beta = _param(np.zeros(n))
        self.running_mean = np.zeros(n, dtype=np.float32)
        self.running_var = np.ones(n, dtype=np.float32)
        self.axis = axis
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            self.axis,
        )


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(n))
        self.beta = _param(np.zeros(n))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
