"""Command-line entry point: generate, train, eval, gradcheck, infer."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RANGE_TAGS, load_config
from .errors import ComboGaitError, ContractError, DimensionError

EXIT_OK, EXIT_VALIDATION, EXIT_FORMAT, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("combogait")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _tags(text: str) -> tuple[str, ...]:
    tags = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [t for t in tags if t not in RANGE_TAGS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown range tags {bad}; choose from {','.join(RANGE_TAGS)}")
    return tags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="combogait", description="Multi-modal multi-task gait recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic walker dataset")
    gen.add_argument("--config", help="config file; only [data] is used")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--subjects", type=int)
    gen.add_argument("--sequences-per-subject", type=int)
    gen.add_argument("--frames", type=int)
    gen.add_argument("--test-sequences", type=int, help="trailing sequences per subject put in the test split")
    gen.add_argument("--ranges", type=_tags, help="comma-separated range tags, cycled over sequences")
    gen.add_argument("--views", type=_floats, help="comma-separated view angles in degrees, cycled over sequences")
    gen.add_argument("--out-dir", required=True)

    tr = sub.add_parser("train", help="train on the train split of a dataset directory")
    tr.add_argument("--config", help="config file with [model] [train] [loss] [data] sections")
    tr.add_argument("--data-dir", required=True, help="directory holding manifest.csv")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    tr.add_argument("--iterations", type=int, help="override [train] iterations")
    tr.add_argument("--reference", action="store_true", help="start from the desk-scale model config")

    ev = sub.add_parser("eval", help="probe/gallery CMC and attribute accuracy")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--report", required=True, help="output CSV")
    ev.add_argument("--gallery-split", default="train")
    ev.add_argument("--probe-split", help="default: test if present, else the gallery split")
    ev.add_argument("--probes-include-gallery", action="store_true", help="also rank the gallery sequences themselves")
    ev.add_argument("--maxrank", type=int, default=10)

    gc = sub.add_parser("gradcheck", help="run the gradient oracle suite (exit 3 on failure)")
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--skip-model", action="store_true", help="only the per-operation checks")

    inf = sub.add_parser("infer", help="embedding and attribute predictions for one sequence pair")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--sil", required=True, help="silhouette file")
    inf.add_argument("--smpl", required=True, help="SMPL file")
    return parser


def cmd_generate(args) -> int:
    from .data import generate_dataset

    cfg = load_config(args.config).data
    overrides = {
        "seed": args.seed,
        "subjects": args.subjects,
        "sequences_per_subject": args.sequences_per_subject,
        "frames": args.frames,
        "test_sequences": args.test_sequences,
        "ranges": args.ranges,
        "views": args.views,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    ds = generate_dataset(cfg, args.out_dir)
    print(f"wrote {len(ds)} sequences of {len(ds.subject_ids())} subjects to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import Config, ModelConfig
    from .data import load_dataset
    from .training import build_model, train

    base = Config(model=ModelConfig.reference()) if args.reference else None
    cfg = load_config(args.config, base)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    ds = load_dataset(Path(args.data_dir) / "manifest.csv").split("train")
    model = build_model(cfg.model, ds)
    trace = args.trace or f"{args.out}.trace.csv"

    def progress(it, row):
        if cfg.train.log_every and it % cfg.train.log_every == 0:
            log.info("iteration %d loss %.5f", it, row[1])

    result = train(model, ds, cfg.train, cfg.loss, checkpoint=args.out, trace_path=trace, callback=progress)
    last = result.trace[-1][1] if result.trace else float("nan")
    print(f"trained {cfg.train.iterations} iterations; final loss {last:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate
    from .training import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    report = evaluate(model, ds, args.gallery_split, args.probe_split, args.probes_include_gallery, args.maxrank)
    report.write(args.report)
    row = report.overall
    print(f"rank1 {row.cmc[0]:.2f} age {row.accu_age:.2f} bmi {row.accu_bmi:.2f} sex {row.accu_sex:.2f} probes {row.n_probes}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(range(args.seeds), include_model=not args.skip_model)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} {r.error:.3e} ({r.seconds:.1f}s)")
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_infer(args) -> int:
    from .data import read_silhouettes, read_smpl
    from .evaluation import extract_embedding
    from .training import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    emb, pred = extract_embedding(model, read_silhouettes(args.sil), read_smpl(args.smpl))
    np.set_printoptions(threshold=sys.maxsize, linewidth=120)
    print(f"embedding_dim {emb.size}")
    print("embedding " + " ".join(repr(float(v)) for v in emb))
    print(f"age_class {pred[0]}")
    print(f"sex_class {pred[1]}")
    print(f"bmi_class {pred[2]}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "infer": cmd_infer,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ComboGaitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ContractError, DimensionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
