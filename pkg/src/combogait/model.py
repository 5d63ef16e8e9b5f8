"""The assembled multi-modal, multi-task gait network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .encoders import ReferenceCNN, SilhouetteEncoder, SmplEncoder, check_silhouettes
from .errors import ConfigError, DataError, DimensionError
from .fusion import fuse, pad_to_square, smpl_to_matrix, temporal_pool
from .multitask import (
    AttributeHeads,
    AttributeLogits,
    DirectAttributeHeads,
    FusionBlock,
    GaitHead,
    gait_tokens,
    hpp,
    init_task_tokens,
    run_blocks,
)
from .nn import Module, _param
from .numerics import Tensor, ops


@dataclass
class ForwardResult:
    f_gait: Tensor
    logits: AttributeLogits
    e_sil: Tensor
    e_smpl: Tensor | None
    e_fused: Tensor
    g_fused: Tensor
    g_tilde: Tensor
    tokens: Tensor | None
    attention: list = field(default_factory=list)

    def embedding(self) -> np.ndarray:
        """F_gait flattened per sample: (B, C''*P), channel-major then part."""
        f = self.f_gait.data
        return f.reshape(f.shape[0], -1)


class IdentityClassifier(Module):
    """Per-part bias-free map C'' -> N identities, used only by the training loss."""

    def __init__(self, n_parts: int, dim: int, n_ids: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(dim)
        self.weight = _param(rng.uniform(-bound, bound, (n_parts, dim, n_ids)))

    @property
    def n_ids(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, f_gait) -> Tensor:
        """(B, C'', P) -> logits (P, B, N)."""
        return ops.matmul(ops.transpose(f_gait, (2, 0, 1)), self.weight)


class ComboGaitModel(Module):
    """Silhouette CNN + SMPL MLP, matrix fusion, temporal max-pool, task-token blocks, heads.

    ``sil_encoder`` replaces the reference CNN when ``cfg.encoder == "external"``.
    """

    def __init__(self, cfg: ModelConfig, sil_encoder: SilhouetteEncoder | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        if cfg.encoder == "external":
            if sil_encoder is None:
                raise ConfigError("encoder kind 'external' needs a sil_encoder instance")
            self.sil_encoder = sil_encoder
        else:
            self.sil_encoder = ReferenceCNN(cfg, rng)
        if tuple(self.sil_encoder.out_hw) != cfg.feature_hw or self.sil_encoder.out_channels != cfg.channels:
            raise ConfigError(
                f"encoder output {(self.sil_encoder.out_channels, *self.sil_encoder.out_hw)} "
                f"disagrees with config {(cfg.channels, *cfg.feature_hw)}"
            )
        self.smpl_encoder = SmplEncoder(cfg, rng)
        n_classes = (cfg.n_age, cfg.n_sex, cfg.n_bmi)
        c = cfg.channels
        if cfg.task_fusion:
            self.task_tokens = init_task_tokens(3, cfg.token_dim, cfg.token_sigma, rng)
            self.blocks = [
                FusionBlock(cfg.token_dim, c, cfg.n_heads, rng, cfg.self_attention) for _ in range(cfg.n_blocks)
            ]
            self.attribute_heads = AttributeHeads(cfg.token_dim, n_classes, rng)
        else:
            self.direct_heads = DirectAttributeHeads(
                c * cfg.n_parts, cfg.direct_hidden, n_classes, rng, cfg.bn_momentum, cfg.bn_eps
            )
        self.gait_head = GaitHead(cfg.n_parts, c, cfg.gait_dim, rng)
        self.id_classifier = (
            IdentityClassifier(cfg.n_parts, cfg.gait_dim, cfg.n_train_ids, rng) if cfg.n_train_ids > 0 else None
        )

    @property
    def dtype(self):
        return self.gait_head.weight.dtype

    def forward(
        self,
        sil,
        smpl,
        rng: np.random.Generator | None = None,
        validate: bool = True,
        keep_attention: bool = False,
    ) -> ForwardResult:
        """Full forward pass on (B, T, H, W) masks and (B, T, 82) SMPL vectors."""
        cfg = self.cfg
        sil_arr = sil.data if isinstance(sil, Tensor) else np.asarray(sil)
        smpl_arr = smpl.data if isinstance(smpl, Tensor) else np.asarray(smpl)
        if validate:
            check_silhouettes(sil_arr, cfg.height, cfg.width)
        if smpl_arr.ndim != 3 or smpl_arr.shape[-1] != cfg.smpl_dim:
            raise DimensionError(f"SMPL input must be (B, T, {cfg.smpl_dim}), got {smpl_arr.shape}")
        if smpl_arr.shape[:2] != sil_arr.shape[:2]:
            raise DataError(f"silhouette frames {sil_arr.shape[:2]} and SMPL frames {smpl_arr.shape[:2]} are not aligned")
        if self.training and rng is None:
            rng = np.random.default_rng(0)
        sil_t = sil if isinstance(sil, Tensor) else Tensor(sil_arr.astype(self.dtype))
        smpl_t = smpl if isinstance(smpl, Tensor) else Tensor(smpl_arr.astype(self.dtype))

        e_sil = self.sil_encoder(sil_t)
        s = pad_to_square(e_sil)
        hmax = s.shape[-1]
        if cfg.smpl_fusion:
            e_smpl = self.smpl_encoder(smpl_t, rng)
            m = smpl_to_matrix(e_smpl, hmax)
        else:
            e_smpl = None
            m = Tensor(np.zeros((s.shape[0], 1, s.shape[2], hmax, hmax), dtype=self.dtype))
        e_fused = fuse(s, m)
        g_fused = temporal_pool(e_fused)
        g_tilde = hpp(g_fused)
        f_gait = self.gait_head(g_tilde)

        attention: list = [] if keep_attention else None
        if cfg.task_fusion:
            b = g_fused.shape[0]
            tokens = ops.broadcast_to(self.task_tokens, (b, *self.task_tokens.shape))
            tokens = run_blocks(tokens, gait_tokens(g_fused), self.blocks, attention)
            logits = self.attribute_heads(tokens)
        else:
            tokens = None
            logits = self.direct_heads(g_tilde)
        return ForwardResult(
            f_gait=f_gait,
            logits=logits,
            e_sil=e_sil,
            e_smpl=e_smpl,
            e_fused=e_fused,
            g_fused=g_fused,
            g_tilde=g_tilde,
            tokens=tokens,
            attention=attention or [],
        )

    __call__ = forward
