"""Command-line entry point: synth | train | predict | score | gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The C2F_THREADS
environment variable caps worker threads (0 or unset picks automatically);
it is applied to the BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap() -> None:
    raw = os.environ.get("C2F_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(cap))


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="c2fnet", description="Camouflaged-object detection toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic camouflage dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=8, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size (multiple of 32)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--contrast", type=float, default=0.35, help="object/background contrast in (0, 1]")

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--data", required=True, help="path to manifest.tsv")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="output directory for checkpoints and trace")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("predict", help="write sigmoid prediction maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="path to manifest.tsv")
    p.add_argument("--out", required=True, help="output directory for PNG maps")

    p = sub.add_parser("score", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of prediction PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--out", required=True, help="report TSV path")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--full", action="store_true", help="add the end-to-end network check")
    p.add_argument("--seeds", type=int, default=20, help="random seeds per check")

    return parser


def _cmd_synth(args) -> int:
    from .datagen import SynthConfig, write_dataset

    cfg = SynthConfig(
        image_size=args.size, contrast_delta=args.contrast, seed=args.seed, count=args.count
    )
    manifest = write_dataset(cfg, args.out)
    print(f"wrote {args.count} samples; manifest at {manifest}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    result = train(cfg, args.data, args.out, resume_from=args.resume)
    print(f"trained {len(result.trace)} steps; final loss {result.trace[-1].loss_total:.6f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"trace: {result.trace_path}")
    return 0


def _cmd_predict(args) -> int:
    from .trainer import predict

    written = predict(args.checkpoint, args.data, args.out)
    print(f"wrote {len(written)} prediction maps to {args.out}")
    return 0


def _cmd_score(args) -> int:
    from .metrics import evaluate_dataset, pair_from_uint8
    from .png_io import read_png

    def stems(d):
        try:
            return {os.path.splitext(f)[0]: os.path.join(d, f)
                    for f in sorted(os.listdir(d)) if f.endswith(".png")}
        except OSError as exc:
            raise RuntimeError(f"cannot list {d}: {exc}") from exc

    preds = stems(args.pred)
    gts = stems(args.gt)
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        for s in missing_gt:
            print(f"unmatched prediction (no ground truth): {s}", file=sys.stderr)
        for s in missing_pred:
            print(f"unmatched ground truth (no prediction): {s}", file=sys.stderr)
        raise RuntimeError(f"{len(missing_gt) + len(missing_pred)} unmatched stems")

    pairs = []
    for stem in sorted(preds):
        pred_img = read_png(preds[stem])
        gt_img = read_png(gts[stem])
        if pred_img.ndim == 3:
            pred_img = pred_img.mean(axis=2).round().astype("uint8")
        if gt_img.ndim == 3:
            gt_img = gt_img.mean(axis=2).round().astype("uint8")
        pairs.append(pair_from_uint8(pred_img, gt_img, name=stem))
    report = evaluate_dataset(pairs)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_tsv())
    print(report.to_tsv(), end="")
    return 0


def _cmd_gradcheck(args) -> int:
    from .verify import block_checks, end_to_end_check, operator_checks

    worst = 0.0
    for name, err in operator_checks(seeds=args.seeds):
        print(f"op    {name:<18} max rel err {err:.3e}")
        worst = max(worst, err)
    for name, err in block_checks(seeds=args.seeds):
        print(f"block {name:<18} max rel err {err:.3e}")
        worst = max(worst, err)
    if args.full:
        err = end_to_end_check()
        print(f"full  {'network+loss':<18} max rel err {err:.3e}")
        worst = max(worst, err)
    ok = worst < 1e-4
    print(f"overall max rel err {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def run(argv) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help paths exit 0 through here
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "predict": _cmd_predict,
        "score": _cmd_score,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    _apply_thread_cap()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
