"""Embedding extraction, CMC ranking, attribute accuracy and per-range reports."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .config import RANGE_TAGS
from .data import Dataset, SequenceRecord
from .errors import DataError, ProtocolError
from .model import ComboGaitModel
from .numerics import no_tape

MAXRANK = 10


def report_header(maxrank: int = MAXRANK) -> tuple[str, ...]:
    return ("scope", *(f"rank{k}" for k in range(1, maxrank + 1)), "accu_age", "accu_bmi", "accu_sex", "n_probes")


REPORT_HEADER = report_header()


def extract_embedding(model: ComboGaitModel, sil, smpl) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forward of one (T, H, W) / (T, 82) pair.

    Returns the flattened F_gait (C''*P,) and the (age, sex, bmi) argmax classes.
    """
    sil, smpl = np.asarray(sil), np.asarray(smpl)
    if sil.ndim != 3 or smpl.ndim != 2:
        raise DataError(f"expected (T, H, W) silhouettes and (T, D) SMPL, got {sil.shape} and {smpl.shape}")
    if sil.shape[0] != smpl.shape[0]:
        raise DataError(f"{sil.shape[0]} silhouette frames vs {smpl.shape[0]} SMPL frames")
    was_training = model.training
    model.eval()
    try:
        with no_tape():
            res = model(sil[None], smpl[None])
    finally:
        model.train(was_training)
    return res.embedding()[0].copy(), res.logits.predictions()[0]


def extract_all(model: ComboGaitModel, records: list[SequenceRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack embeddings (n, d) and attribute predictions (n, 3), one sequence at a time."""
    if not records:
        return np.zeros((0, 0), dtype=np.float32), np.zeros((0, 3), dtype=np.int64)
    embs, preds = zip(*(extract_embedding(model, r.sil, r.smpl) for r in records))
    return np.stack(embs), np.stack(preds)


def _distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    p = probe.astype(np.float64)
    g = gallery.astype(np.float64)
    diff = p[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def cmc(probe_emb, probe_ids, gallery_emb, gallery_ids, maxrank: int = MAXRANK) -> np.ndarray:
    """Rank-1..maxrank identification rates in percent.

    Gallery entries are ordered by Euclidean distance to each probe; equal
    distances keep gallery insertion order.
    """
    probe_emb, gallery_emb = np.asarray(probe_emb), np.asarray(gallery_emb)
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    if len(gallery_ids) == 0:
        raise ProtocolError("gallery is empty")
    if len(probe_ids) == 0:
        raise ProtocolError("no probes to rank")
    if maxrank < 1:
        raise ProtocolError("maxrank must be at least 1")
    missing = sorted(set(probe_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ProtocolError(f"probe identities absent from the gallery: {missing}")
    if probe_emb.shape[0] != len(probe_ids) or gallery_emb.shape[0] != len(gallery_ids):
        raise DataError("embedding and identity counts differ")
    hits = np.zeros(maxrank, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, gallery_emb.size))
    for start in range(0, len(probe_ids), chunk):
        d = _distances(probe_emb[start : start + chunk], gallery_emb)
        order = np.argsort(d, axis=1, kind="stable")
        match = gallery_ids[order] == probe_ids[start : start + chunk, None]
        first = match.argmax(axis=1)  # every probe has a match somewhere
        for f in first:
            if f < maxrank:
                hits[f:] += 1
    return 100.0 * hits / len(probe_ids)


def attribute_accuracy(preds, labels) -> tuple[float, float, float]:
    """Percent exact matches, returned as (age, bmi, sex); inputs are (n, 3) in age, sex, bmi order."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 2 or preds.shape[1] != 3:
        raise DataError(f"predictions {preds.shape} and labels {labels.shape} must both be (n, 3)")
    if len(preds) == 0:
        raise DataError("no predictions to score")
    acc = 100.0 * (preds == labels).mean(axis=0)
    return float(acc[0]), float(acc[2]), float(acc[1])


@dataclass
class ReportRow:
    scope: str
    cmc: np.ndarray
    accu_age: float
    accu_bmi: float
    accu_sex: float
    n_probes: int

    def cells(self) -> list[str]:
        vals = [*self.cmc, self.accu_age, self.accu_bmi, self.accu_sex]
        return [self.scope, *(f"{v:.4f}" for v in vals), str(self.n_probes)]


def _row(scope, probe_emb, probe_ids, probe_pred, probe_labels, gallery_emb, gallery_ids, maxrank) -> ReportRow:
    curve = cmc(probe_emb, probe_ids, gallery_emb, gallery_ids, maxrank)
    age, bmi, sex = attribute_accuracy(probe_pred, probe_labels)
    return ReportRow(scope, curve, age, bmi, sex, len(probe_ids))


def per_range_report(
    probe_emb, probe_ids, probe_pred, probe_labels, probe_ranges, gallery_emb, gallery_ids, maxrank: int = MAXRANK
) -> list[ReportRow]:
    """One row per range tag in fixed order (close, 100m, ... 1000m); empty groups are skipped with a warning."""
    probe_ranges = np.asarray(probe_ranges)
    rows = []
    for tag in RANGE_TAGS:
        sel = probe_ranges == tag
        if not sel.any():
            warnings.warn(f"no probes at range {tag}; row omitted", RuntimeWarning, stacklevel=2)
            continue
        rows.append(
            _row(tag, probe_emb[sel], np.asarray(probe_ids)[sel], probe_pred[sel], probe_labels[sel], gallery_emb, gallery_ids, maxrank)
        )
    return rows


def split_protocol(
    dataset: Dataset, gallery_split: str = "train", probe_split: str | None = None, probes_include_gallery: bool = False
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """Gallery = first sequence of each subject in ``gallery_split``.

    Probes = sequences of ``probe_split`` (default: ``test`` when present,
    else ``gallery_split``), minus the gallery entries unless
    ``probes_include_gallery``.
    """
    if probe_split is None:
        probe_split = "test" if any(r.split == "test" for r in dataset.records) else gallery_split
    gallery: list[SequenceRecord] = []
    seen = set()
    for r in dataset.records:
        if r.split == gallery_split and r.subject_id not in seen:
            seen.add(r.subject_id)
            gallery.append(r)
    chosen = {id(r) for r in gallery}
    probes = [
        r for r in dataset.records if r.split == probe_split and (probes_include_gallery or id(r) not in chosen)
    ]
    if not gallery:
        raise ProtocolError(f"no sequences in gallery split {gallery_split!r}")
    if not probes:
        raise ProtocolError(f"no probe sequences in split {probe_split!r}")
    return gallery, probes


@dataclass
class EvalReport:
    rows: list[ReportRow]

    @property
    def overall(self) -> ReportRow:
        return self.rows[0]

    def to_csv(self) -> str:
        lines = [",".join(report_header(len(self.overall.cmc)))]
        lines += [",".join(row.cells()) for row in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def evaluate(
    model: ComboGaitModel,
    dataset: Dataset,
    gallery_split: str = "train",
    probe_split: str | None = None,
    probes_include_gallery: bool = False,
    maxrank: int = MAXRANK,
) -> EvalReport:
    """Overall row followed by the per-range rows."""
    gallery, probes = split_protocol(dataset, gallery_split, probe_split, probes_include_gallery)
    g_emb, _ = extract_all(model, gallery)
    p_emb, p_pred = extract_all(model, probes)
    g_ids = np.array([r.subject_id for r in gallery])
    p_ids = np.array([r.subject_id for r in probes])
    p_labels = np.array([r.labels() for r in probes])
    p_ranges = np.array([r.range_tag for r in probes])
    rows = [_row("overall", p_emb, p_ids, p_pred, p_labels, g_emb, g_ids, maxrank)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rows += per_range_report(p_emb, p_ids, p_pred, p_labels, p_ranges, g_emb, g_ids, maxrank)
    return EvalReport(rows)
