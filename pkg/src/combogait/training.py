"""Losses, P x K batch sampling, momentum SGD, checkpoints and the training loop."""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import LossWeights, ModelConfig, TrainConfig, model_config_digest
from .data import Dataset
from .errors import ConfigError, DataError, FormatError, LabelError, NumericError
from .model import ComboGaitModel, IdentityClassifier
from .multitask import AttributeLogits
from .numerics import Tape, Tensor, as_tensor, ops

TERM_NAMES = ("loss_tri", "loss_ce_gait", "loss_age", "loss_sex", "loss_bmi")
TRACE_HEADER = ("iteration", "loss_total", *TERM_NAMES)


# --------------------------------------------------------------------- losses


def batch_all_triplet(f_gait, ids, margin: float = 0.2) -> Tensor:
    """Batch-all triplet loss on (B, C'', P) part embeddings.

    Per part, the hinge is averaged over the valid triplets whose hinge is
    positive; the part losses are then averaged.
    """
    f = as_tensor(f_gait)
    ids = np.asarray(ids)
    b, _, p = f.shape
    if ids.shape != (b,):
        raise DataError(f"ids must have shape ({b},), got {ids.shape}")
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    # valid[a, p, n]: p shares a's identity (p != a), n does not
    valid = pos[:, :, None] & ~same[:, None, :]
    if not valid.any():
        warnings.warn("batch has no valid triplet; triplet loss is 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=f.dtype))
    d = ops.pairwise_distance(ops.transpose(f, (2, 0, 1)))  # (P, B, B)
    t = ops.add(ops.sub(ops.reshape(d, (p, b, b, 1)), ops.reshape(d, (p, b, 1, b))), margin)
    hinge = ops.mul(ops.relu(t), valid.astype(f.dtype))
    active = ((t.data > 0) & valid).sum(axis=(1, 2, 3))
    per_part = ops.mul(ops.sum(hinge, axis=(1, 2, 3)), (1.0 / np.maximum(active, 1)).astype(f.dtype))
    return ops.mean(per_part)


def gait_ce(f_gait, ids, clf: IdentityClassifier) -> Tensor:
    """Identity cross-entropy averaged over parts and batch."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= clf.n_ids):
        raise LabelError(f"identity labels must lie in [0, {clf.n_ids}), got range [{ids.min()}, {ids.max()}]")
    logits = clf(f_gait)  # (P, B, N)
    return ops.cross_entropy(logits, np.broadcast_to(ids, logits.shape[:2]))


def attribute_ce(logits: AttributeLogits, labels) -> tuple[Tensor, Tensor, Tensor]:
    """Per-task softmax cross-entropy for (age, sex, bmi) labels of shape (B, 3)."""
    labels = np.asarray(labels)
    out = []
    for k, (name, head) in enumerate(zip(("age", "sex", "bmi"), logits.as_tuple())):
        n = head.shape[-1]
        col = labels[:, k]
        if col.size and (col.min() < 0 or col.max() >= n):
            raise LabelError(f"{name} labels must lie in [0, {n})")
        out.append(ops.cross_entropy(head, col))
    return tuple(out)


@dataclass
class LossTerms:
    tri: Tensor
    ce_gait: Tensor
    age: Tensor
    sex: Tensor
    bmi: Tensor

    def as_tuple(self) -> tuple:
        return self.tri, self.ce_gait, self.age, self.sex, self.bmi

    def values(self) -> tuple[float, ...]:
        return tuple(float(as_tensor(t).data) for t in self.as_tuple())


def combo_loss(terms, w: LossWeights) -> Tensor:
    """alpha1*tri + alpha2*ce_gait + beta1*age + beta2*sex + beta3*bmi."""
    w.validate()
    parts = terms.as_tuple() if isinstance(terms, LossTerms) else tuple(terms)
    if len(parts) != 5:
        raise ConfigError("combo_loss takes exactly five terms")
    weights = (w.alpha1, w.alpha2, w.beta1, w.beta2, w.beta3)
    total = None
    for weight, term in zip(weights, parts):
        scaled = ops.scale(as_tensor(term), weight)
        total = scaled if total is None else ops.add(total, scaled)
    return total


# --------------------------------------------------------------------- sampling


@dataclass
class Batch:
    sil: np.ndarray  # (B, T, H, W) uint8
    smpl: np.ndarray  # (B, T, 82) float32
    ids: np.ndarray  # (B,) index into the training identity list
    labels: np.ndarray  # (B, 3) age, sex, bmi classes
    subject_ids: list[str]


def identity_index(dataset: Dataset) -> dict[str, int]:
    return {sid: i for i, sid in enumerate(dataset.subject_ids())}


def sample_batch(
    dataset: Dataset,
    p_subjects: int,
    k_seqs: int,
    frames: int,
    rng: np.random.Generator,
    id_map: dict[str, int] | None = None,
) -> Batch:
    """P identities without replacement, K sequences each, one T-frame window per sequence.

    Sequences are drawn with replacement only when an identity has fewer
    than K. Windows shorter than T wrap around.
    """
    groups = dataset.by_subject()
    if not groups:
        raise DataError("cannot sample from an empty dataset")
    if p_subjects > len(groups):
        raise DataError(f"need {p_subjects} identities, dataset has {len(groups)}")
    if p_subjects < 1 or k_seqs < 1 or frames < 1:
        raise ConfigError("P, K and T must be positive")
    id_map = id_map or identity_index(dataset)
    names = list(groups)
    chosen = rng.choice(len(names), size=p_subjects, replace=False)
    sils, smpls, ids, labels, sids = [], [], [], [], []
    for idx in chosen:
        seqs = groups[names[idx]]
        picks = rng.choice(len(seqs), size=k_seqs, replace=len(seqs) < k_seqs)
        for j in picks:
            rec = seqs[j]
            n = rec.frames
            start = int(rng.integers(0, n - frames + 1)) if n >= frames else int(rng.integers(0, n))
            window = (start + np.arange(frames)) % n
            sils.append(rec.sil[window])
            smpls.append(rec.smpl[window])
            ids.append(id_map[rec.subject_id])
            labels.append(rec.labels())
            sids.append(rec.subject_id)
    return Batch(np.stack(sils), np.stack(smpls), np.asarray(ids), np.asarray(labels), sids)


# --------------------------------------------------------------------- optimizer


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= (self.lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: list[Tensor], cfg: TrainConfig, state: SGD | None = None) -> SGD:
    """One update with ``cfg`` hyperparameters; pass the returned state back in for momentum."""
    state = state or SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    state.step()
    return state


# --------------------------------------------------------------------- checkpoints

_CK_MAGIC = b"CGCK"
_CK_VERSION = 1


def save_checkpoint(path: str | os.PathLike, model: ComboGaitModel) -> None:
    """Magic, version, config digest, config JSON, then (name, shape, float32 LE values) blobs."""
    cfg_json = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    out = bytearray()
    out += struct.pack("<4sH", _CK_MAGIC, _CK_VERSION)
    out += model_config_digest(model.cfg)
    out += struct.pack("<I", len(cfg_json)) + cfg_json
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = np.asarray(state[name])
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=len(self.raw))
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def read_checkpoint(path: str | os.PathLike) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.raw[:4] != _CK_MAGIC:
        raise FormatError(f"checkpoint: bad magic {r.raw[:4]!r}", offset=0)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != _CK_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}", offset=4)
    digest = r.take(32, "config digest")
    (n,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in json.loads(r.take(n, "config")).items()})
    except (ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint: unreadable config ({exc})", offset=cfg_at) from None
    if model_config_digest(cfg) != digest:
        raise FormatError("checkpoint: config digest mismatch", offset=6)
    (count,) = r.unpack("<I", "entry count")
    state = {}
    for _ in range(count):
        (klen,) = r.unpack("<H", "name length")
        name = r.take(klen, "name").decode()
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        state[name] = np.frombuffer(r.take(size, name), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.raw):
        raise FormatError("checkpoint: trailing bytes", offset=r.pos)
    return cfg, state


def load_checkpoint(path: str | os.PathLike, sil_encoder=None) -> ComboGaitModel:
    cfg, state = read_checkpoint(path)
    model = ComboGaitModel(cfg, sil_encoder)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not fit its config: {exc}") from None
    return model


# --------------------------------------------------------------------- training loop


def build_model(cfg: ModelConfig, dataset: Dataset, sil_encoder=None) -> ComboGaitModel:
    """Model whose identity classifier covers every subject of ``dataset``."""
    return ComboGaitModel(dataclasses.replace(cfg, n_train_ids=len(dataset.subject_ids())), sil_encoder)


def compute_losses(model: ComboGaitModel, batch: Batch, margin: float, rng=None) -> LossTerms:
    if model.id_classifier is None:
        raise ConfigError("training needs a model built with n_train_ids > 0")
    res = model(batch.sil, batch.smpl, rng, validate=False)
    age, sex, bmi = attribute_ce(res.logits, batch.labels)
    return LossTerms(
        batch_all_triplet(res.f_gait, batch.ids, margin),
        gait_ce(res.f_gait, batch.ids, model.id_classifier),
        age,
        sex,
        bmi,
    )


@dataclass
class TrainResult:
    model: ComboGaitModel
    trace: list[tuple]  # rows matching TRACE_HEADER


def write_trace(path: str | os.PathLike, rows: list[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for row in rows:
            fh.write(",".join([str(row[0]), *(repr(float(v)) for v in row[1:])]) + "\n")


def train(
    model: ComboGaitModel,
    dataset: Dataset,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    checkpoint: str | os.PathLike | None = None,
    trace_path: str | os.PathLike | None = None,
    callback: Callable[[int, tuple], None] | None = None,
) -> TrainResult:
    """sample -> forward -> combo loss -> backward -> SGD, ``cfg.iterations`` times.

    Raises NumericError naming the first non-finite loss term.
    """
    weights = weights or LossWeights()
    weights.validate()
    if not len(dataset):
        raise DataError("training set is empty")
    id_map = identity_index(dataset)
    if model.id_classifier is None or model.id_classifier.n_ids != len(id_map):
        raise ConfigError(f"identity classifier must cover the {len(id_map)} training identities")
    sample_rng = np.random.default_rng([int(cfg.seed), 0])
    dropout_rng = np.random.default_rng([int(cfg.seed), 1])
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    model.train()
    rows: list[tuple] = []
    for it in range(1, cfg.iterations + 1):
        batch = sample_batch(dataset, cfg.p_subjects, cfg.k_seqs, cfg.frames, sample_rng, id_map)
        with Tape() as tape:
            terms = compute_losses(model, batch, cfg.margin, dropout_rng)
            total = combo_loss(terms, weights)
        values = terms.values()
        for name, v in zip(TERM_NAMES, values):
            if not np.isfinite(v):
                raise NumericError(f"iteration {it}: {name} is {v}; it is the first non-finite loss term")
        if not np.isfinite(float(total.data)):
            raise NumericError(f"iteration {it}: weighted total loss is not finite")
        opt.zero_grad()
        tape.backward(total)
        opt.step()
        row = (it, float(total.data), *values)
        rows.append(row)
        if callback is not None:
            callback(it, row)
        if checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint, model)
    opt.zero_grad()
    if checkpoint is not None:
        save_checkpoint(checkpoint, model)
    if trace_path is not None:
        write_trace(trace_path, rows)
    return TrainResult(model, rows)


__all__ = [
    "Batch",
    "LossTerms",
    "SGD",
    "TRACE_HEADER",
    "TrainResult",
    "attribute_ce",
    "batch_all_triplet",
    "build_model",
    "combo_loss",
    "compute_losses",
    "gait_ce",
    "load_checkpoint",
    "read_checkpoint",
    "sample_batch",
    "save_checkpoint",
    "sgd_step",
    "train",
    "write_trace",
]
