"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning checks (4, 5) and the ablation sweep (6) train real models on
one CPU core and take minutes; the whole module runs in well under an hour.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from combogait import gradsuite
from combogait.config import DataConfig, LossWeights, ModelConfig, TrainConfig
from combogait.data import (
    generate_dataset,
    generate_subject,
    read_silhouettes,
    read_smpl,
    write_silhouettes,
    write_smpl,
)
from combogait.errors import FormatError
from combogait.evaluation import attribute_accuracy, cmc, evaluate, split_protocol
from combogait.fusion import pad_to_square
from combogait.numerics.gradcheck import gradcheck
from combogait.model import ComboGaitModel
from combogait.training import build_model, train

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
        assert ok, detail

    return emit


def walker_batch(rng, b, t, cfg):
    sil = (rng.random((b, t, cfg.height, cfg.width)) < 0.3).astype(np.uint8)
    return sil, rng.standard_normal((b, t, cfg.smpl_dim)).astype(np.float32)


# 1 -----------------------------------------------------------------------


def test_c1_gradient_oracle_suite(verdict):
    t0 = time.perf_counter()
    results = gradsuite.run_suite(range(3), include_model=False)
    f, inputs = gradsuite.micro_model_case(batch=2, frames=2)
    results.append(gradsuite.SuiteResult("model_micro_b2", gradcheck(f, inputs), 0.0))
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    ok = worst.error < 1e-4 and seconds < 60.0 and len(results) > 30
    verdict(1, ok, f"{len(results)} checks, worst {worst.name} {worst.error:.2e} (< 1e-4), {seconds:.1f}s (< 60s)")


# 2 -----------------------------------------------------------------------


def test_c2_fusion_identity(verdict):
    cfg = ModelConfig.reference()
    rng = np.random.default_rng(0)
    sil, smpl = walker_batch(rng, 2, 4, cfg)
    checks = []

    zeroed = ComboGaitModel(cfg)
    zeroed.smpl_encoder.out.weight.data[...] = 0
    zeroed.smpl_encoder.out.bias.data[...] = 0
    for mode in ("train", "eval"):
        getattr(zeroed, mode)()
        a = zeroed(sil, smpl, np.random.default_rng(1))
        b = zeroed(sil, smpl * 3 - 7, np.random.default_rng(1))
        checks.append(a.e_fused.data.tobytes() == pad_to_square(a.e_sil).data.tobytes())
        checks.append(a.f_gait.data.tobytes() == b.f_gait.data.tobytes())
        checks.append(all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.logits.as_tuple(), b.logits.as_tuple())))

    off = ComboGaitModel(ModelConfig.reference(smpl_fusion=False)).eval()
    a, b = off(sil, smpl), off(sil, rng.standard_normal(smpl.shape))
    checks.append(a.f_gait.data.tobytes() == b.f_gait.data.tobytes())
    checks.append(a.e_fused.data.tobytes() == pad_to_square(a.e_sil).data.tobytes())

    live = ComboGaitModel(cfg).eval()
    checks.append(live(sil, smpl).f_gait.data.tobytes() != live(sil, smpl * 3 - 7).f_gait.data.tobytes())
    verdict(2, all(checks), f"{sum(checks)}/{len(checks)} bitwise identity and perturbation checks")


# 3 -----------------------------------------------------------------------


def test_c3_paper_shapes(verdict):
    cfg = ModelConfig()
    model = ComboGaitModel(cfg).eval()
    sil, smpl = walker_batch(np.random.default_rng(0), 8, 30, cfg)
    res = model(sil, smpl)
    got = {
        "E_sil": res.e_sil.shape,
        "E_smpl": res.e_smpl.shape,
        "tokens": res.tokens.shape,
        "G_tilde": res.g_tilde.shape,
        "F_gait": res.f_gait.shape,
        "heads": tuple(t.shape for t in res.logits.as_tuple()),
    }
    want = {
        "E_sil": (8, 512, 30, 16, 11),
        "E_smpl": (8, 30, 256),
        "tokens": (8, 3, 512),
        "G_tilde": (8, 512, 16),
        "F_gait": (8, 256, 16),
        "heads": ((8, 5), (8, 2), (8, 4)),
    }
    bad = {k: v for k, v in got.items() if v != want[k]}
    verdict(3, not bad and res.embedding().shape == (8, 4096), f"paper-scale shapes {'match' if not bad else bad}")


# 4 -----------------------------------------------------------------------


def test_c4_overfit(verdict):
    ds = generate_dataset(DataConfig(seed=1, subjects=4, sequences_per_subject=4, frames=30, test_sequences=0))
    model = build_model(ModelConfig.reference(), ds)
    t0 = time.perf_counter()
    res = train(model, ds, TrainConfig(iterations=500, p_subjects=4, k_seqs=2, frames=30, seed=0), LossWeights())
    seconds = time.perf_counter() - t0
    first, last = res.trace[0][1], res.trace[-1][1]
    rank1 = evaluate(res.model, ds, probe_split="train").overall.cmc[0]
    ok = last < 0.1 * first and rank1 == 100.0 and seconds < 900
    verdict(4, ok, f"loss {first:.4f} -> {last:.4f} (< 10%), train Rank-1 {rank1:.1f} (= 100), {seconds:.0f}s (< 900s)")


# 5 -----------------------------------------------------------------------

C5_DATA = DataConfig(seed=0, subjects=20, sequences_per_subject=6, frames=30, test_sequences=2)


def test_c5_latent_oracle_separability(verdict):
    """Nearest neighbour on generator-side quantities, run before any training."""
    ds = generate_dataset(C5_DATA)
    gallery, probes = split_protocol(ds)
    shape = lambda r: r.smpl[:, 69:79].mean(0)
    rank1 = cmc(
        np.stack([shape(r) for r in probes]), [r.subject_id for r in probes],
        np.stack([shape(r) for r in gallery]), [r.subject_id for r in gallery], 1,
    )[0]
    subjects = [generate_subject(C5_DATA.seed, i) for i in range(C5_DATA.subjects)]
    ratio = np.array([s.shoulder_hip_ratio for _, s in subjects])
    male = np.array([m.sex == "male" for m, _ in subjects])
    sex_nn = np.mean([male[np.argsort(np.abs(ratio - r))[1]] == male[i] for i, r in enumerate(ratio)]) * 100
    ok = rank1 >= 50 and sex_nn >= 90
    verdict(5, ok, f"latent oracle: SMPL-shape NN Rank-1 {rank1:.1f}, sex NN {sex_nn:.1f} (both clear 50/90)")


def test_c5_generalization(verdict):
    ds = generate_dataset(C5_DATA)
    model = build_model(ModelConfig.reference(), ds.split("train"))
    res = train(model, ds.split("train"), TrainConfig(iterations=2000, p_subjects=4, k_seqs=2, frames=30, seed=0), LossWeights())
    row = evaluate(res.model, ds).overall
    ok = row.cmc[0] >= 50 and row.accu_sex >= 90 and row.n_probes == 40
    verdict(5, ok, f"Rank-1 {row.cmc[0]:.1f} (>= 50, chance 5), sex {row.accu_sex:.1f} (>= 90) over {row.n_probes} probes")


# 6 -----------------------------------------------------------------------

ABLATIONS = [
    *[("beta", dict(), LossWeights.with_beta(b)) for b in (0.0, 0.01, 0.1, 1.0)],
    *[("fusion", dict(task_fusion=v), None) for v in (True, False)],
    *[("self_attention", dict(self_attention=v), None) for v in (True, False)],
    *[("blocks", dict(n_blocks=n), None) for n in (1, 2, 3)],
    *[("heads", dict(n_heads=h), None) for h in (2, 4, 8)],
    *[("M", dict(token_dim=m), None) for m in (256, 512, 1024)],
]


def test_c6_ablation_toggles(verdict):
    ds = generate_dataset(DataConfig(seed=2, subjects=6, sequences_per_subject=3, frames=12, test_sequences=0))
    failures, ran = [], 0
    for axis, overrides, weights in ABLATIONS:
        try:
            model = build_model(ModelConfig.reference(**overrides), ds)
            res = train(model, ds, TrainConfig(iterations=50, p_subjects=3, k_seqs=2, frames=12), weights or LossWeights())
            assert len(res.trace) == 50 and np.isfinite(np.array(res.trace)[:, 1:]).all()
            ran += 1
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            failures.append(f"{axis}={overrides or weights}: {exc!r}")
    verdict(6, not failures, f"{ran}/{len(ABLATIONS)} configurations trained 50 iterations {failures or ''}")


# 7 -----------------------------------------------------------------------


def brute_force_cmc(probe, pids, gallery, gids, maxrank):
    hits = np.zeros(maxrank)
    for p, pid in zip(probe, pids):
        order = sorted(range(len(gallery)), key=lambda i: (float(np.linalg.norm(p - gallery[i])), i))
        first = [gids[i] for i in order].index(pid)
        hits[first:] += 1
    return 100.0 * hits / len(pids)


def test_c7_metric_properties(verdict):
    rng = np.random.default_rng(7)
    monotone = matches = 0
    for _ in range(100):
        n_ids = int(rng.integers(2, 12))
        gids = np.concatenate([np.arange(n_ids), rng.integers(0, n_ids, int(rng.integers(0, 40)))])
        pids = rng.integers(0, n_ids, int(rng.integers(1, 25)))
        dim = int(rng.integers(1, 8))
        probe, gallery = rng.standard_normal((len(pids), dim)), rng.standard_normal((len(gids), dim))
        if rng.random() < 0.3:  # exact duplicates exercise the tie-break
            gallery[-1] = gallery[0]
            probe[0] = gallery[0]
        out = cmc(probe, pids, gallery, gids, 10)
        monotone += bool((np.diff(out) >= 0).all())
        matches += bool(np.array_equal(out, brute_force_cmc(probe, pids, gallery, gids, 10)))

    labels = np.array([[0, 0, 0], [1, 1, 1], [2, 0, 2], [3, 1, 3], [4, 0, 0], [0, 1, 1], [1, 0, 2], [2, 1, 3]])
    preds = labels.copy()
    preds[[0, 3, 5], 0] = (labels[[0, 3, 5], 0] + 1) % 5  # 5/8 age correct
    preds[[2], 1] = 1 - labels[2, 1]  # 7/8 sex correct
    preds[[1, 4], 2] = (labels[[1, 4], 2] + 2) % 4  # 6/8 bmi correct
    counts = attribute_accuracy(preds, labels) == (62.5, 75.0, 87.5)
    ok = monotone == 100 and matches == 100 and counts
    verdict(7, ok, f"monotone {monotone}/100, oracle match {matches}/100, hand counts {'match' if counts else 'differ'}")


# 8 -----------------------------------------------------------------------

CLI_CONFIG = """[model]
sil_channels = 16,32,32
token_dim = 64
gait_dim = 64
[train]
iterations = 100
p_subjects = 3
k_seqs = 2
frames = 10
seed = 11
"""


def run_pipeline(root: Path) -> dict[str, bytes]:
    root.mkdir()
    (root / "run.ini").write_text(CLI_CONFIG)
    env = {**os.environ, "PYTHONHASHSEED": str(np.random.default_rng().integers(1 << 30))}
    steps = [
        ["generate", "--seed", "7", "--subjects", "4", "--sequences-per-subject", "3", "--frames", "10",
         "--test-sequences", "1", "--out-dir", str(root / "data")],
        ["train", "--config", str(root / "run.ini"), "--data-dir", str(root / "data"), "--out", str(root / "model.ckpt")],
        ["eval", "--checkpoint", str(root / "model.ckpt"), "--manifest", str(root / "data" / "manifest.csv"),
         "--report", str(root / "report.csv")],
    ]
    for argv in steps:
        subprocess.run([sys.executable, "-m", "combogait", *argv], check=True, env=env, capture_output=True)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c8_determinism(verdict, tmp_path):
    a, b = run_pipeline(tmp_path / "a"), run_pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    artifacts = {"model.ckpt", "model.ckpt.trace.csv", "report.csv", "data/manifest.csv"}
    ok = not differing and artifacts <= a.keys()
    verdict(8, ok, f"{len(a)} artifacts from generate/train(100)/eval byte-identical across two runs {differing or ''}")


# 9 -----------------------------------------------------------------------


def test_c9_format_roundtrips(verdict, tmp_path):
    rng = np.random.default_rng(9)
    same = 0
    for i in range(1000):
        t = int(rng.integers(1, 6))
        if i % 2:
            arr = (rng.random((t, int(rng.integers(1, 70)), int(rng.integers(1, 50)))) < rng.random()).astype(np.uint8)
            write_silhouettes(tmp_path / "x", arr)
            back = read_silhouettes(tmp_path / "x")
        else:
            arr = (rng.standard_normal((t, 82)) * 10.0 ** rng.integers(-30, 30)).astype(np.float32)
            write_smpl(tmp_path / "x", arr)
            back = read_smpl(tmp_path / "x")
        same += back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()

    write_silhouettes(tmp_path / "s", np.ones((2, 3, 4), np.uint8))
    write_smpl(tmp_path / "m", np.zeros((2, 82), np.float32))
    sil, smpl = (tmp_path / "s").read_bytes(), (tmp_path / "m").read_bytes()
    corrupt = [
        (read_silhouettes, b"XXXX" + sil[4:], 0),
        (read_silhouettes, sil[:4] + b"\x02\x00" + sil[6:], 4),
        (read_silhouettes, sil[:12], 12),
        (read_silhouettes, sil[:-1], len(sil) - 1),
        (read_smpl, b"CGSL" + smpl[4:], 0),
        (read_smpl, smpl[:4] + b"\x00\x00" + smpl[6:], 4),
        (read_smpl, smpl[:10] + (83).to_bytes(4, "little") + smpl[14:], 10),
        (read_smpl, smpl + b"\x00", len(smpl)),
    ]
    rejected = 0
    for reader, blob, offset in corrupt:
        (tmp_path / "bad").write_bytes(blob)
        try:
            reader(tmp_path / "bad")
        except FormatError as exc:
            rejected += exc.offset == offset and exc.exit_code == 2
    ok = same == 1000 and rejected == len(corrupt)
    verdict(9, ok, f"{same}/1000 bitwise round-trips, {rejected}/{len(corrupt)} corrupted files rejected with code 2 at the right offset")
