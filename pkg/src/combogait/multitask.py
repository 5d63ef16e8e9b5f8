"""Task tokens, multi-task fusion blocks, horizontal pyramid pooling and heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .nn import BatchNorm, LayerNorm, Linear, Module, _param
from .numerics import Tensor, as_tensor, ops


@dataclass
class AttributeLogits:
    age: Tensor
    sex: Tensor
    bmi: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.age, self.sex, self.bmi

    def predictions(self) -> np.ndarray:
        """(B, 3) argmax classes in (age, sex, bmi) order."""
        return np.stack([t.data.argmax(-1) for t in self.as_tuple()], axis=1)


def init_task_tokens(n_tasks: int, dim: int, sigma: float, rng: np.random.Generator) -> Tensor:
    """i.i.d. N(0, sigma^2) tokens, one row per task in (age, sex, bmi) order."""
    if n_tasks < 1 or dim < 1:
        raise ConfigError("task token count and width must be positive")
    return Tensor((rng.standard_normal((n_tasks, dim)) * sigma).astype(np.float32), requires_grad=True)


def gait_tokens(g) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C): spatial positions in row-major order."""
    g = as_tensor(g)
    b, c, h, w = g.shape
    return ops.transpose(ops.reshape(g, (b, c, h * w)), (0, 2, 1))


def multi_head_attention(
    query_in: Tensor,
    kv_in: Tensor,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: int,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention; returns the projected output and the weights (B, h, J, L)."""
    b, j, _ = query_in.shape
    length = kv_in.shape[1]
    dim = q.weight.shape[1]
    if dim % n_heads:
        raise ConfigError(f"width {dim} is not divisible by {n_heads} heads")
    d = dim // n_heads

    def split(x, n):
        return ops.transpose(ops.reshape(x, (b, n, n_heads, d)), (0, 2, 1, 3))

    qh = split(q(query_in), j)
    kh = split(k(kv_in), length)
    vh = split(v(kv_in), length)
    scores = ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, vh), (0, 2, 1, 3)), (b, j, dim))
    return o(ctx), attn.data


class FusionBlock(Module):
    """Self-attention over task tokens, cross-attention to gait tokens, token MLP.

    Each sublayer is residual and post-normalised.
    """

    def __init__(self, dim: int, gait_channels: int, n_heads: int, rng: np.random.Generator, self_attention: bool = True):
        self.n_heads = n_heads
        self.use_self_attention = self_attention
        if self_attention:
            self.sa_q, self.sa_k, self.sa_v, self.sa_o = (Linear(dim, dim, rng) for _ in range(4))
            self.ln_sa = LayerNorm(dim)
        self.ca_q = Linear(dim, dim, rng)
        self.ca_k = Linear(gait_channels, dim, rng)
        self.ca_v = Linear(gait_channels, dim, rng)
        self.ca_o = Linear(dim, dim, rng)
        self.ln_ca = LayerNorm(dim)
        self.mlp1 = Linear(dim, dim, rng)
        self.mlp2 = Linear(dim, dim, rng)
        self.ln_mlp = LayerNorm(dim)

    def self_attention(self, tokens: Tensor, trace: list | None = None) -> Tensor:
        out, w = multi_head_attention(tokens, tokens, self.sa_q, self.sa_k, self.sa_v, self.sa_o, self.n_heads)
        if trace is not None:
            trace.append(("self", w))
        return self.ln_sa(ops.add(tokens, out))

    def cross_attention(self, tokens: Tensor, gait: Tensor, trace: list | None = None) -> Tensor:
        out, w = multi_head_attention(tokens, gait, self.ca_q, self.ca_k, self.ca_v, self.ca_o, self.n_heads)
        if trace is not None:
            trace.append(("cross", w))
        return self.ln_ca(ops.add(tokens, out))

    def token_mlp(self, tokens: Tensor) -> Tensor:
        return self.ln_mlp(ops.add(tokens, self.mlp2(ops.relu(self.mlp1(tokens)))))

    def __call__(self, tokens: Tensor, gait: Tensor, trace: list | None = None) -> Tensor:
        if self.use_self_attention:
            tokens = self.self_attention(tokens, trace)
        tokens = self.cross_attention(tokens, gait, trace)
        return self.token_mlp(tokens)


def run_blocks(tokens: Tensor, gait: Tensor, blocks: list[FusionBlock], trace: list | None = None) -> Tensor:
    if not blocks:
        raise ConfigError("run_blocks needs at least one fusion block")
    for block in blocks:
        tokens = block(tokens, gait, trace)
    return tokens


def hpp(g) -> Tensor:
    """Single-scale horizontal pooling: per row band, max + mean over columns -> (B, C, H)."""
    g = as_tensor(g)
    return ops.add(ops.max_over_axis(g, axis=-1), ops.mean(g, axis=-1))


class GaitHead(Module):
    """Separate bias-free map C' -> C'' for each of the P parts."""

    def __init__(self, n_parts: int, c_in: int, c_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = _param(rng.uniform(-bound, bound, (n_parts, c_in, c_out)))

    def __call__(self, g_tilde) -> Tensor:
        parts_first = ops.transpose(as_tensor(g_tilde), (2, 0, 1))
        return ops.transpose(ops.matmul(parts_first, self.weight), (1, 2, 0))


class AttributeHeads(Module):
    def __init__(self, dim: int, n_classes: tuple[int, int, int], rng: np.random.Generator):
        self.age, self.sex, self.bmi = (Linear(dim, n, rng) for n in n_classes)

    def __call__(self, tokens) -> AttributeLogits:
        tokens = as_tensor(tokens)
        heads = (self.age, self.sex, self.bmi)
        return AttributeLogits(*(head(ops.take(tokens, (slice(None), i))) for i, head in enumerate(heads)))


class AttributeMLP(Module):
    """Three linear layers with batch-norm and ReLU between them."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator, momentum=0.9, eps=1e-5):
        self.fc1, self.bn1 = Linear(n_in, hidden, rng), BatchNorm(hidden, 1, momentum, eps)
        self.fc2, self.bn2 = Linear(hidden, hidden, rng), BatchNorm(hidden, 1, momentum, eps)
        self.fc3 = Linear(hidden, n_out, rng)

    def __call__(self, x) -> Tensor:
        h = ops.relu(self.bn1(self.fc1(x)))
        h = ops.relu(self.bn2(self.fc2(h)))
        return self.fc3(h)


class DirectAttributeHeads(Module):
    """Fusion-off baseline: attributes read straight from the pooled part features."""

    def __init__(self, n_in: int, hidden: int, n_classes: tuple[int, int, int], rng: np.random.Generator, momentum=0.9, eps=1e-5):
        self.age, self.sex, self.bmi = (AttributeMLP(n_in, hidden, n, rng, momentum, eps) for n in n_classes)

    def __call__(self, g_tilde) -> AttributeLogits:
        g_tilde = as_tensor(g_tilde)
        flat = ops.reshape(g_tilde, (g_tilde.shape[0], -1))
        return AttributeLogits(self.age(flat), self.sex(flat), self.bmi(flat))


def direct_attribute_heads(g_tilde, heads: DirectAttributeHeads, cfg: ModelConfig) -> AttributeLogits:
    if cfg.task_fusion:
        raise ConfigError("direct attribute heads are the fusion-off baseline; task_fusion is enabled")
    return heads(g_tilde)
