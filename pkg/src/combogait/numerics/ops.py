"""Operator set with recorded adjoints.

Every function takes :class:`Tensor` (or array-like) operands and returns a
new Tensor. Adjoints are closures over the forward intermediates.
"""
from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return record("relu", out, (a,), lambda g: (np.where(out > 0, g, 0).astype(a.dtype, copy=False),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root whose subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d,)

    return record("sqrt", out, (a,), bw)


# --------------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return record("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def max_over_axis(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return record("max", out, (a,), bw)


# --------------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the adjoint."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record("take", np.array(out, copy=True), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad_last2(a, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes at the bottom and the right."""
    a = as_tensor(a)
    if bottom == 0 and right == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(0, bottom), (0, right)]
    h, w = a.shape[-2:]
    return record("pad", np.pad(a.data, widths), (a,), lambda g: (g[..., :h, :w].copy(),))


# --------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------- normalisers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over all leading axes.

    ``logits`` is (..., n_classes) and ``labels`` the matching integer array.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    count = builtins.max(labels.size, 1)
    out = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1, -1)
        return (grad * (g / count),)

    return record("cross_entropy", out, (logits,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        n = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return record("layer_norm", out.astype(x.dtype), (x, gamma, beta), bw)


def _feature_sum(a: np.ndarray, axis: int, b: np.ndarray | None = None) -> np.ndarray:
    """Sum over every axis but ``axis`` (of ``a * b`` when ``b`` is given)."""
    letters = "abcdefghij"[: a.ndim]
    spec = f"{letters}->{letters[axis]}" if b is None else f"{letters},{letters}->{letters[axis]}"
    return np.einsum(spec, a) if b is None else np.einsum(spec, a, b)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    axis: int = 1,
) -> Tensor:
    """Batch normalisation over every axis except the feature ``axis``.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    n = x.size // x.shape[axis]
    if training:
        if n < 2:
            raise ContractError("batch_norm in train mode needs at least 2 samples per feature")
        mu = _feature_sum(x.data, axis) / n
        var = np.maximum(_feature_sum(x.data, axis, x.data) / n - mu * mu, 0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)
    a = gamma.data * inv
    out = x.data * a.reshape(bshape)
    out += (beta.data - mu * a).reshape(bshape)

    def bw(g):
        sg = _feature_sum(g, axis)
        sgx = _feature_sum(g, axis, x.data)
        # sum of g * xhat per feature
        sgxhat = inv * (sgx - mu * sg)
        gx = None
        if x.requires_grad:
            if training:
                k = (gamma.data * inv / n).astype(x.dtype)
                c2 = k * inv * sgxhat
                gx = g * (n * k).reshape(bshape)
                gx -= x.data * c2.reshape(bshape)
                gx += (c2 * mu - k * sg).reshape(bshape)
            else:
                gx = g * a.reshape(bshape)
        return gx, sgxhat.reshape(gamma.shape), sg.reshape(beta.shape)

    return record("batch_norm", out, (x, gamma, beta), bw)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------- convolution


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None, channels_last: bool = False) -> Tensor:
    """Cross-correlation with a (c_out, c_in, kh, kw) kernel and optional per-channel bias.

    ``x`` is (b, c_in, h, w), or (b, h, w, c_in) with ``channels_last``; the
    output uses the same layout.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    c_axis = 3 if channels_last else 1
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[c_axis] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {kernel.shape} are incompatible")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    xd = x.data if channels_last else x.data.transpose(0, 2, 3, 1)
    b, h, w, c = xd.shape
    co, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # cols: (b, ho, wo, c, kh, kw) contiguous so one gemm covers the whole batch
    cols = np.ascontiguousarray(win).reshape(b * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(co, -1)
    prod = cols @ kmat.T
    if bias is not None:
        prod += bias.data
    out = prod.reshape(b, ho, wo, co)
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gx = gk = gb = None
        gm = g.reshape(-1, co) if channels_last else np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(0)
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(kernel.shape)
        if x.requires_grad:
            # kernel reordered so each (i, j) tap gives a channel-last block
            kmat_t = kernel.data.transpose(0, 2, 3, 1).reshape(co, -1)
            gcols = (gm @ kmat_t).reshape(b, ho, wo, kh, kw, c)
            gxp = np.zeros((b, hp, wp, c), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :]
            if not channels_last:
                gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", out, inputs, bw)


def max_pool2x2(x, axis: int = -2) -> Tensor:
    """2x2 max pooling with stride 2 over axes ``axis`` and ``axis + 1`` (first maximum wins).

    Window order for tie-breaking is row-major: (0,0), (0,1), (1,0), (1,1).
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    if ax + 1 >= x.ndim:
        raise DimensionError(f"max_pool2x2: axis {axis} leaves no second pooling axis in {x.shape}")
    h, w = x.shape[ax], x.shape[ax + 1]
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2x2 needs even spatial extents, got {(h, w)}")
    lead = (slice(None),) * ax
    quads = [x.data[(*lead, slice(i, None, 2), slice(j, None, 2))] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        taken = np.zeros(out.shape, dtype=bool)
        parts = []
        for q in quads:
            hit = q == out
            hit &= ~taken
            taken |= hit
            parts.append(np.where(hit, g, 0).astype(x.dtype, copy=False))
        # (..., h/2, w/2, ...) x 4 -> (..., h/2, 2, w/2, 2, ...) -> (..., h, w, ...)
        top = np.stack(parts[:2], axis=ax + 2)
        bottom = np.stack(parts[2:], axis=ax + 2)
        grad = np.stack([top, bottom], axis=ax + 1)
        return (grad.reshape(x.shape),)

    return record("max_pool2x2", out, (x,), bw)


# --------------------------------------------------------------------- metric helpers


def pairwise_distance(x) -> Tensor:
    """Euclidean distances between rows: (..., n, d) -> (..., n, n).

    The gradient of a zero distance is taken as zero.
    """
    x = as_tensor(x)
    diff = x.data[..., :, None, :] - x.data[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, g / np.where(dist > 0, dist, 1), 0)
        coef = coef + np.swapaxes(coef, -1, -2)
        gx = (coef[..., None] * diff).sum(-2)
        return (gx.astype(x.dtype),)

    return record("pairwise_distance", dist, (x,), bw)
