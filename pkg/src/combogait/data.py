"""Attribute binning, binary sequence formats, manifests and the synthetic walker dataset."""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RANGE_TAGS, DataConfig
from .errors import DataError, FormatError, ValidationError

HEIGHT, WIDTH = 64, 44
SMPL_DIM = 82
AGE_RANGE = (18.0, 85.0)
HEIGHT_RANGE = (52.0, 81.0)
WEIGHT_RANGE = (93.0, 438.0)
BMI_RANGE = (14.23, 68.65)
SEXES = ("female", "male")

# additive mask noise rate per range tag (fraction of background pixels switched on)
RANGE_NOISE = {"close": 0.0, "100m": 0.01, "200m": 0.02, "400m": 0.04, "500m": 0.05, "600m": 0.06, "1000m": 0.10}

MANIFEST_FIELDS = (
    "subject_id",
    "sequence_path",
    "smpl_path",
    "split",
    "age",
    "sex",
    "height_in",
    "weight_lb",
    "bmi",
    "view_tag",
    "range_tag",
)

# SMPL body-joint slots (pelvis excluded), three axis-angle values each
J_L_HIP, J_R_HIP, J_SPINE1, J_L_KNEE, J_R_KNEE = 0, 1, 2, 3, 4
J_L_SHOULDER, J_R_SHOULDER, J_L_ELBOW, J_R_ELBOW = 15, 16, 17, 18
POSE_END, SHAPE_END = 69, 79


# --------------------------------------------------------------------- labels


def bin_age(age: float) -> int:
    """Left-closed 20-year bins anchored at 0; everything from 80 up is class 4."""
    if not np.isfinite(age) or age < 0:
        raise ValidationError(f"age must be a nonnegative number, got {age!r}")
    return min(int(math.floor(age / 20.0)), 4)


def bin_bmi(bmi: float) -> int:
    """0 underweight (<18.5), 1 healthy, 2 overweight (from 25), 3 obese (from 30)."""
    if not np.isfinite(bmi) or bmi <= 0:
        raise ValidationError(f"bmi must be positive, got {bmi!r}")
    if bmi < 18.5:
        return 0
    if bmi < 25.0:
        return 1
    if bmi < 30.0:
        return 2
    return 3


def bmi_from(height_in: float, weight_lb: float) -> float:
    return 703.0 * weight_lb / (height_in * height_in)


def sex_class(sex: str) -> int:
    try:
        return SEXES.index(sex)
    except ValueError:
        raise ValidationError(f"sex must be one of {SEXES}, got {sex!r}") from None


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    age: float
    sex: str
    height_in: float
    weight_lb: float
    bmi: float

    def labels(self) -> tuple[int, int, int]:
        """(age_class, sex_class, bmi_class)."""
        return bin_age(self.age), sex_class(self.sex), bin_bmi(self.bmi)


@dataclass(frozen=True)
class GaitSignature:
    """Latent walking style of one synthetic subject.

    Lengths and widths are fractions of the figure height in pixels.
    """

    figure_height: float
    stride_freq: float
    leg_length: float
    arm_length: float
    torso_length: float
    torso_width: float
    shoulder_hip_ratio: float
    lean: float
    hip_swing: float
    knee_flex: float
    arm_swing: float
    limb_width: float
    betas: tuple[float, ...]


# --------------------------------------------------------------------- generator


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), 0])


def generate_subject(seed: int, index: int) -> tuple[SubjectMeta, GaitSignature]:
    """Deterministic subject meta plus the latent signature that drives rendering.

    Stride frequency falls with age, torso width grows with bmi and the
    shoulder/hip ratio is set by sex.
    """
    rng = _subject_rng(seed, index)
    sex = SEXES[int(rng.integers(2))]
    age = float(rng.uniform(*AGE_RANGE))
    mean_h = 69.0 if sex == "male" else 64.0
    height = float(np.clip(rng.normal(mean_h, 3.0), *HEIGHT_RANGE))
    # pick bmi, then keep it inside the window where weight stays in range too
    lo = max(BMI_RANGE[0], bmi_from(height, WEIGHT_RANGE[0]))
    hi = min(BMI_RANGE[1], bmi_from(height, WEIGHT_RANGE[1]))
    bmi_draw = float(np.clip(np.exp(rng.normal(math.log(26.0), 0.22)), lo, hi))
    weight = float(np.clip(bmi_draw * height * height / 703.0, *WEIGHT_RANGE))
    bmi = bmi_from(height, weight)
    meta = SubjectMeta(f"s{index:04d}", age, sex, height, weight, bmi)

    noise = rng.normal(size=12)
    ratio = (1.40 if sex == "male" else 0.90) + 0.05 * noise[0]
    sig = GaitSignature(
        figure_height=40.0 + 18.0 * (height - HEIGHT_RANGE[0]) / (HEIGHT_RANGE[1] - HEIGHT_RANGE[0]),
        stride_freq=(1.0 / 16.0) * (1.15 - 0.006 * (age - AGE_RANGE[0])) * (1.0 + 0.05 * noise[1]),
        leg_length=0.48 + 0.02 * noise[2],
        arm_length=0.34 + 0.02 * noise[3],
        torso_length=0.30 + 0.015 * noise[4],
        torso_width=0.10 + 0.004 * (bmi - BMI_RANGE[0]) + 0.01 * noise[5],
        shoulder_hip_ratio=ratio,
        lean=0.004 * (age - AGE_RANGE[0]) / 10.0 + 0.05 * noise[6],
        hip_swing=0.42 + 0.05 * noise[7],
        knee_flex=0.55 + 0.08 * noise[8],
        arm_swing=0.35 + 0.08 * noise[9],
        limb_width=0.028 * (1.0 + (bmi - 25.0) / 60.0) * (1.0 + 0.05 * noise[10]),
        betas=_shape_betas(height, bmi, ratio, rng),
    )
    return meta, sig


def _shape_betas(height: float, bmi: float, ratio: float, rng: np.random.Generator) -> tuple[float, ...]:
    rest = rng.normal(0.0, 0.5, size=7)
    return (
        (height - 66.0) / 6.0,
        (bmi - 27.0) / 8.0,
        (ratio - 1.15) / 0.25,
        *(float(v) for v in rest),
    )


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0:
        w += 2.0 * math.pi
    return w - math.pi


def _capsule(yy, xx, p0, p1, radius):
    """Mask of points within ``radius`` of segments p0-p1; p0/p1 are (T, 2) as (y, x)."""
    ay, ax = p0[:, 0, None, None], p0[:, 1, None, None]
    by, bx = p1[:, 0, None, None], p1[:, 1, None, None]
    dy, dx = by - ay, bx - ax
    den = np.maximum(dy * dy + dx * dx, 1e-9)
    t = np.clip(((yy - ay) * dy + (xx - ax) * dx) / den, 0.0, 1.0)
    ey, ex = yy - (ay + t * dy), xx - (ax + t * dx)
    return ey * ey + ex * ex <= radius * radius


def _trapezoid(yy, xx, top, bottom, half_top, half_bottom):
    """Filled quad between two horizontal lines centred at ``top``/``bottom`` (T, 2)."""
    ty, tx = top[:, 0, None, None], top[:, 1, None, None]
    by, bx = bottom[:, 0, None, None], bottom[:, 1, None, None]
    span = np.maximum(by - ty, 1e-9)
    s = (yy - ty) / span
    inside = (s >= 0) & (s <= 1)
    cx = tx + s * (bx - tx)
    half = half_top + s * (half_bottom - half_top)
    return inside & (np.abs(xx - cx) <= half)


def render_sequence(
    sig: GaitSignature,
    view_angle: float,
    rng: np.random.Generator,
    frames: int = 30,
    noise: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a stick-figure walker: ((T, 64, 44) uint8 in {0,1}, (T, 82) float32).

    Sagittal joint swings are scaled by cos(view_angle), so a view of pi
    gives the mirrored walk. ``noise`` is the probability of switching a
    pixel on.
    """
    if frames < 1:
        raise ValidationError("a sequence needs at least one frame")
    f = sig.figure_height
    phase = rng.uniform(0.0, 2.0 * math.pi)
    speed = 1.0 + 0.03 * rng.normal()
    amp = 1.0 + 0.05 * rng.normal()
    cx = WIDTH / 2.0 + rng.uniform(-1.5, 1.5)
    feet_y = HEIGHT - 3.0 + rng.uniform(-1.0, 1.0)
    side = math.cos(view_angle)

    t = np.arange(frames, dtype=np.float64)
    theta = 2.0 * math.pi * sig.stride_freq * speed * t + phase
    hip_l = sig.hip_swing * amp * np.sin(theta)
    hip_r = sig.hip_swing * amp * np.sin(theta + math.pi)
    knee_l = sig.knee_flex * amp * np.maximum(0.0, np.sin(theta - math.pi / 2.0))
    knee_r = sig.knee_flex * amp * np.maximum(0.0, np.sin(theta + math.pi / 2.0))
    sh_l = -sig.arm_swing * amp * np.sin(theta)
    sh_r = -sig.arm_swing * amp * np.sin(theta + math.pi)
    elbow = np.full(frames, 0.25)
    bob = 0.015 * f * np.cos(2.0 * theta)

    leg = sig.leg_length * f
    thigh, shin = 0.52 * leg, 0.48 * leg
    arm = sig.arm_length * f
    upper, fore = 0.55 * arm, 0.45 * arm
    torso = sig.torso_length * f
    head_r = 0.065 * f
    hip_half = 0.5 * sig.torso_width * f
    sh_half = hip_half * sig.shoulder_hip_ratio
    limb_r = max(sig.limb_width * f, 0.8)

    hip = np.stack([feet_y - leg + bob, np.full(frames, cx)], axis=1)
    shoulder = hip + np.stack([np.full(frames, -torso * math.cos(sig.lean)), np.full(frames, torso * math.sin(sig.lean) * side)], 1)
    neck_len = 0.04 * f
    head = shoulder + np.array([-(neck_len + head_r), 0.0])

    def limb(root, a1, a2, l1, l2):
        # angles from the downward vertical, forward is +x scaled by the view
        mid = root + np.stack([l1 * np.cos(a1), l1 * np.sin(a1) * side], 1)
        end = mid + np.stack([l2 * np.cos(a2), l2 * np.sin(a2) * side], 1)
        return mid, end

    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
    yy, xx = yy[None] + 0.5, xx[None] + 0.5
    mask = _trapezoid(yy, xx, shoulder, hip, sh_half, hip_half)
    mask |= _capsule(yy, xx, head, head, head_r)
    mask |= _capsule(yy, xx, shoulder, head, limb_r)
    for a_hip, a_knee in ((hip_l, knee_l), (hip_r, knee_r)):
        knee, foot = limb(hip, a_hip, a_hip - a_knee, thigh, shin)
        mask |= _capsule(yy, xx, hip, knee, limb_r * 1.3)
        mask |= _capsule(yy, xx, knee, foot, limb_r * 1.1)
    for a_sh in (sh_l, sh_r):
        elbow_pt, wrist = limb(shoulder, a_sh, a_sh + elbow, upper, fore)
        mask |= _capsule(yy, xx, shoulder, elbow_pt, limb_r)
        mask |= _capsule(yy, xx, elbow_pt, wrist, limb_r * 0.9)
    if noise > 0:
        mask |= rng.random(mask.shape) < noise

    smpl = np.zeros((frames, SMPL_DIM), dtype=np.float64)
    pose = smpl[:, :POSE_END].reshape(frames, 23, 3)
    pose[:, J_L_HIP, 0], pose[:, J_R_HIP, 0] = -hip_l, -hip_r
    pose[:, J_L_KNEE, 0], pose[:, J_R_KNEE, 0] = knee_l, knee_r
    pose[:, J_L_SHOULDER, 0], pose[:, J_R_SHOULDER, 0] = -sh_l, -sh_r
    pose[:, J_L_ELBOW, 1], pose[:, J_R_ELBOW, 1] = elbow, -elbow
    pose[:, J_SPINE1, 0] = sig.lean
    pose += rng.normal(0.0, 0.01, pose.shape)
    smpl[:, :POSE_END] = np.clip(pose.reshape(frames, -1), -math.pi, math.pi)
    smpl[:, POSE_END:SHAPE_END] = np.asarray(sig.betas) + rng.normal(0.0, 0.05, 10)
    smpl[:, SHAPE_END + 1] = wrap_angle(view_angle - math.pi / 2.0)
    return mask.astype(np.uint8), smpl.astype(np.float32)


# --------------------------------------------------------------------- binary formats

_SIL_MAGIC, _SMPL_MAGIC = b"CGSL", b"CGSM"
_VERSION = 1
_SIL_HEADER = struct.Struct("<4sHIII")
_SMPL_HEADER = struct.Struct("<4sHII")


def write_silhouettes(path: str | os.PathLike, masks: np.ndarray) -> None:
    """Binary masks (T, H, W) in {0,1} stored as bytes {0,255}."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValidationError(f"silhouettes must be (T, H, W), got {masks.shape}")
    if not np.isin(masks, (0, 1)).all():
        raise ValidationError("silhouette masks must contain only 0 and 1")
    t, h, w = masks.shape
    with open(path, "wb") as fh:
        fh.write(_SIL_HEADER.pack(_SIL_MAGIC, _VERSION, t, h, w))
        fh.write((masks.astype(np.uint8) * 255).tobytes())


def _check_header(raw: bytes, magic: bytes, header: struct.Struct, what: str) -> tuple:
    if len(raw) < 4 or raw[:4] != magic:
        raise FormatError(f"{what}: bad magic {raw[:4]!r}, expected {magic!r}", offset=0)
    if len(raw) < header.size:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    fields = header.unpack_from(raw)
    if fields[1] != _VERSION:
        raise FormatError(f"{what}: unsupported version {fields[1]}", offset=4)
    return fields


def read_silhouettes(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    _, _, t, h, w = _check_header(raw, _SIL_MAGIC, _SIL_HEADER, "silhouette file")
    n = t * h * w
    body = raw[_SIL_HEADER.size :]
    if len(body) != n:
        off = _SIL_HEADER.size + min(len(body), n)
        raise FormatError(f"silhouette file: expected {n} payload bytes, found {len(body)}", offset=off)
    data = np.frombuffer(body, dtype=np.uint8).reshape(t, h, w)
    bad = np.flatnonzero((data != 0) & (data != 255))
    if bad.size:
        raise FormatError("silhouette file: pixel values must be 0 or 255", offset=_SIL_HEADER.size + int(bad[0]))
    return (data // 255).astype(np.uint8)


def write_smpl(path: str | os.PathLike, params: np.ndarray) -> None:
    params = np.asarray(params)
    if params.ndim != 2 or params.shape[1] != SMPL_DIM:
        raise ValidationError(f"SMPL parameters must be (T, {SMPL_DIM}), got {params.shape}")
    t, d = params.shape
    with open(path, "wb") as fh:
        fh.write(_SMPL_HEADER.pack(_SMPL_MAGIC, _VERSION, t, d))
        fh.write(params.astype("<f4").tobytes())


def read_smpl(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    _, _, t, d = _check_header(raw, _SMPL_MAGIC, _SMPL_HEADER, "SMPL file")
    if d != SMPL_DIM:
        raise FormatError(f"SMPL file: dimension {d} != {SMPL_DIM}", offset=10)
    n = t * d * 4
    body = raw[_SMPL_HEADER.size :]
    if len(body) != n:
        raise FormatError(
            f"SMPL file: expected {n} payload bytes, found {len(body)}",
            offset=_SMPL_HEADER.size + min(len(body), n),
        )
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float32)


# --------------------------------------------------------------------- manifest and dataset


@dataclass
class SequenceRecord:
    meta: SubjectMeta
    sil: np.ndarray
    smpl: np.ndarray
    split: str = "train"
    view_tag: str = "000"
    range_tag: str = "close"
    sequence_path: str = ""
    smpl_path: str = ""
    attribute_labels: tuple[int, int, int] | None = None  # overrides the labels binned from meta

    def labels(self) -> tuple[int, int, int]:
        return self.attribute_labels if self.attribute_labels is not None else self.meta.labels()

    @property
    def subject_id(self) -> str:
        return self.meta.subject_id

    @property
    def frames(self) -> int:
        return self.sil.shape[0]


@dataclass
class Dataset:
    records: list[SequenceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> "Dataset":
        return Dataset([r for r in self.records if r.split == name])

    def subject_ids(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def by_subject(self) -> dict[str, list[SequenceRecord]]:
        out: dict[str, list[SequenceRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return dict(sorted(out.items()))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(path: str | os.PathLike, records: list[SequenceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            m = r.meta
            writer.writerow(
                [
                    m.subject_id,
                    r.sequence_path,
                    r.smpl_path,
                    r.split,
                    _fmt(m.age),
                    m.sex,
                    _fmt(m.height_in),
                    _fmt(m.weight_lb),
                    _fmt(m.bmi),
                    r.view_tag,
                    r.range_tag,
                ]
            )


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Rows as dicts with numeric fields converted; header and values are validated."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines(keepends=True)
    if not lines or tuple(lines[0].strip().split(",")) != MANIFEST_FIELDS:
        raise FormatError(f"manifest {path}: header must be {','.join(MANIFEST_FIELDS)}", offset=0)
    offsets = np.cumsum([0] + [len(line.encode()) for line in lines]).tolist()
    rows = []
    for lineno, values in enumerate(csv.reader(lines[1:]), start=1):
        try:
            if len(values) != len(MANIFEST_FIELDS):
                raise ValueError(f"{len(values)} fields")
            row = dict(zip(MANIFEST_FIELDS, values))
            for key in ("age", "height_in", "weight_lb", "bmi"):
                row[key] = float(row[key])
            if row["sex"] not in SEXES:
                raise ValueError(f"sex {row['sex']!r}")
            if row["range_tag"] not in RANGE_TAGS:
                raise ValueError(f"range_tag {row['range_tag']!r}")
        except ValueError as exc:
            raise FormatError(f"manifest {path}: bad row {lineno} ({exc})", offset=offsets[lineno]) from None
        rows.append(row)
    return rows


def load_dataset(manifest: str | os.PathLike) -> Dataset:
    """Load every sequence listed in a manifest; paths are relative to its directory."""
    root = Path(manifest).parent
    records = []
    for row in read_manifest(manifest):
        sil = read_silhouettes(root / row["sequence_path"])
        smpl = read_smpl(root / row["smpl_path"])
        if sil.shape[0] != smpl.shape[0]:
            raise DataError(f"{row['sequence_path']}: {sil.shape[0]} silhouette frames vs {smpl.shape[0]} SMPL frames")
        meta = SubjectMeta(row["subject_id"], row["age"], row["sex"], row["height_in"], row["weight_lb"], row["bmi"])
        records.append(
            SequenceRecord(meta, sil, smpl, row["split"], row["view_tag"], row["range_tag"], row["sequence_path"], row["smpl_path"])
        )
    return Dataset(records)


def generate_dataset(cfg: DataConfig, out_dir: str | os.PathLike | None = None) -> Dataset:
    """Synthesize ``cfg.subjects`` walkers with ``cfg.sequences_per_subject`` sequences each.

    The last ``cfg.test_sequences`` sequences of each subject form the test
    split. Views and range tags cycle over the configured lists. With
    ``out_dir`` the dataset is written as binary files plus ``manifest.csv``.
    """
    if cfg.subjects < 1 or cfg.sequences_per_subject < 1 or cfg.frames < 1:
        raise ValidationError("subjects, sequences per subject and frames must all be positive")
    if not 0 <= cfg.test_sequences <= cfg.sequences_per_subject:
        raise ValidationError("test_sequences must lie between 0 and sequences_per_subject")
    unknown = [r for r in cfg.ranges if r not in RANGE_TAGS]
    if unknown or not cfg.ranges or not cfg.views:
        raise ValidationError(f"ranges must be drawn from {RANGE_TAGS} and views must be non-empty")
    n_train = cfg.sequences_per_subject - cfg.test_sequences
    records = []
    for i in range(cfg.subjects):
        meta, sig = generate_subject(cfg.seed, i)
        for j in range(cfg.sequences_per_subject):
            view = float(cfg.views[j % len(cfg.views)])
            range_tag = cfg.ranges[j % len(cfg.ranges)]
            rng = np.random.default_rng([int(cfg.seed), i, j, 1])
            sil, smpl = render_sequence(sig, math.radians(view), rng, cfg.frames, RANGE_NOISE[range_tag])
            name = f"{meta.subject_id}_{j:02d}"
            records.append(
                SequenceRecord(
                    meta,
                    sil,
                    smpl,
                    "train" if j < n_train else "test",
                    f"{int(round(view)) % 360:03d}",
                    range_tag,
                    f"sil/{name}.cgsl",
                    f"smpl/{name}.cgsm",
                )
            )
    if out_dir is not None:
        root = Path(out_dir)
        (root / "sil").mkdir(parents=True, exist_ok=True)
        (root / "smpl").mkdir(parents=True, exist_ok=True)
        for r in records:
            write_silhouettes(root / r.sequence_path, r.sil)
            write_smpl(root / r.smpl_path, r.smpl)
        write_manifest(root / "manifest.csv", records)
    return Dataset(records)
