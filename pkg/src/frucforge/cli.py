"""Command-line entry point: forge, dataset, train, detect, localize, report.

Exit codes: 0 success, 1 usage error (bad flags/config), 2 data error
(missing or malformed files, out-of-range inputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, fcdnet, interp, preprocess, traineval, video as videomod
from .errors import FrucError, InvalidInputError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run config files: plain key=value lines; '#' starts a comment.  Keys must
# name a flag of the chosen subcommand; command-line flags override the file.
# ---------------------------------------------------------------------------


def load_run_config(path) -> dict[str, tuple[str, int]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FrucError(f"cannot read config {path}: {exc.strerror}") from exc
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip().replace("-", "_")] = (value.strip(), lineno)
    return entries


def _apply_config(parser: _Parser, sub: _Parser, args, argv, config_path):
    entries = load_run_config(config_path)
    typed = {}
    actions = {a.dest: a for a in sub._actions}
    for key, (value, lineno) in entries.items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"{config_path}:{lineno}: unknown config key {key!r}")
        action = actions[key]
        try:
            typed[key] = action.type(value) if action.type else value
        except (ValueError, ArithmeticError) as exc:
            raise UsageError(f"{config_path}:{lineno}: bad value for {key}: {exc}")
    sub.set_defaults(**typed)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def write_mask_csv(path, mask) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "forged"])
        for i, flag in enumerate(mask):
            writer.writerow([i, int(flag)])


def write_series_csv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "score"])
        for i, s in enumerate(scores):
            writer.writerow([i, f"{float(s):.6f}"])


def write_score_svg(path, scores, threshold: float = 0.5,
                    width: int = 800, height: int = 300) -> None:
    """Line plot of per-frame forged scores with a rule line at the decision
    threshold.  Deterministic apart from the leading version comment."""
    n = len(scores)
    pad = 40
    px = width - 2 * pad
    py = height - 2 * pad

    def x(i):
        return pad + (px * i / max(n - 1, 1))

    def y(v):
        return pad + py * (1.0 - min(max(float(v), 0.0), 1.0))

    points = " ".join(f"{x(i):.2f},{y(s):.2f}" for i, s in enumerate(scores))
    ty = y(threshold)
    lines = [
        f"<!-- frucforge {__version__} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 8}" font-size="12">forged score per frame</text>',
        f'<text x="8" y="{y(1.0):.2f}" font-size="10">1.0</text>',
        f'<text x="8" y="{y(0.0):.2f}" font-size="10">0.0</text>',
        f'<line x1="{pad}" y1="{ty:.2f}" x2="{width - pad}" y2="{ty:.2f}" '
        f'stroke="red" stroke-dasharray="6,4"/>',
        f'<text x="{width - pad + 2}" y="{ty:.2f}" font-size="10" fill="red">{threshold}</text>',
        f'<polyline points="{points}" fill="none" stroke="blue" stroke-width="1.5"/>',
        "</svg>",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _metrics_text(report: traineval.MetricsReport) -> str:
    def fmt(v):
        return "undefined" if math.isnan(v) else f"{v:.2f}"

    rows = [("TP", report.tp), ("TN", report.tn), ("FP", report.fp), ("FN", report.fn),
            ("TNR %", fmt(report.tnr)), ("TPR %", fmt(report.tpr)),
            ("precision %", fmt(report.precision)), ("recall %", fmt(report.recall)),
            ("F1 %", fmt(report.f1))]
    w = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{w}}  {value}" for name, value in rows)


def write_metrics_csv(path, report: traineval.MetricsReport) -> None:
    row = report.as_row()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(row.keys())
        writer.writerow(["" if isinstance(v, float) and math.isnan(v)
                         else (f"{v:.2f}" if isinstance(v, float) else v)
                         for v in row.values()])


def _reencode(out_path, template: str) -> None:
    """Run an external encoder over the written Y4M and replace it with the
    decoded result.  The template must contain {in} and {out} placeholders."""
    if "{in}" not in template or "{out}" not in template:
        raise UsageError("--reencode-cmd template needs {in} and {out} placeholders")
    with tempfile.TemporaryDirectory() as tmp:
        reenc = os.path.join(tmp, "reencoded.y4m")
        cmd = [arg.replace("{in}", str(out_path)).replace("{out}", reenc)
               for arg in shlex.split(template)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise FrucError(f"re-encode command failed ({proc.returncode}): "
                            f"{proc.stderr.strip()[:500]}")
        reencoded = videomod.read_y4m(reenc)
    videomod.write_y4m(reencoded, out_path)


def _load_net(checkpoint) -> fcdnet.FcdNet:
    if not Path(checkpoint).exists():
        raise FrucError(f"checkpoint not found: {checkpoint}")
    return fcdnet.load(checkpoint)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_forge(args) -> int:
    src = videomod.read_y4m(args.infile)
    plan = interp.plan_conversion(args.src_fps if args.src_fps else src.fps,
                                  args.dst_fps, args.scheme)
    forged, mask = interp.upconvert(src, plan, block_size=args.block,
                                    search_range=args.search)
    videomod.write_y4m(forged, args.out)
    if args.reencode_cmd:
        _reencode(args.out, args.reencode_cmd)
    if args.mask:
        write_mask_csv(args.mask, mask)
    print(f"{args.out}: {len(forged)} frames at {plan.dst_fps} fps, "
          f"forged fraction {plan.forged_fraction}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    pairs, _ = traineval.build_synth_pairs(
        args.videos, seed=args.seed, crop=args.crop,
        stacks_per_video=args.stacks_per_video,
        n_src_frames=args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"pairs-seed{args.seed}.fcds"
    preprocess.write_stack_cache(path, [s for pair in pairs for s in pair])
    print(f"{path}: {len(pairs)} stack pairs ({2 * len(pairs)} stacks)")
    return EXIT_OK


def _split_pairs(pairs, val_fraction, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(val_fraction * len(pairs)))) if val_fraction > 0 else 0
    val_idx = set(order[:n_val].tolist())
    train = [pairs[i] for i in range(len(pairs)) if i not in val_idx]
    val = [pairs[i] for i in sorted(val_idx)]
    return train, val


def cmd_train(args) -> int:
    stacks = []
    for cache in args.caches:
        stacks.extend(preprocess.read_stack_cache(cache))
    pairs = traineval.pair_up(stacks)
    if not pairs:
        raise FrucError("no original/forged pairs found in the given caches")
    crop = pairs[0][0].crop_size
    train_pairs, val_pairs = _split_pairs(pairs, args.val_fraction, args.seed)
    config = fcdnet.desk_config(seed=args.seed, crop_size=crop)
    net = fcdnet.build(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(record):
        parts = [f"epoch {record['epoch']}", f"loss {record['train_loss']:.4f}"]
        if "val_f1" in record:
            parts.append(f"val_acc {record['val_acc']:.2f}")
            parts.append(f"val_f1 {record['val_f1']:.2f}")
        print("  ".join(parts))

    result = traineval.train(net, train_pairs, epochs=args.epochs, lr=args.lr,
                             weight_decay=args.weight_decay, batch_size=args.batch,
                             seed=args.seed, val_pairs=val_pairs or None, log=log)
    ckpt = out / "model.fcdw"
    net.save(ckpt, extra_manifest={"seed": str(args.seed)})
    with open(out / "training.csv", "w", newline="") as fh:
        fields = ["epoch", "train_loss", "val_f1", "val_acc"]
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for record in result.history:
            writer.writerow({k: record.get(k, "") for k in fields})
    manifest_lines = [f"checkpoint={ckpt}"] + \
        [f"{k}={v}" for k, v in sorted(config.to_manifest().items())]
    (out / "run-manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    print(f"saved {ckpt} (best epoch {result.best_epoch}, "
          f"val F1 {result.best_val_f1:.2f})")
    return EXIT_OK


def cmd_detect(args) -> int:
    net = _load_net(args.checkpoint)

    def run_one(path):
        vid = videomod.read_y4m(path)
        verdict = traineval.detect(net, vid, n_stacks=args.stacks, seed=args.seed,
                                   video_id=str(path))
        return {"path": str(path),
                "decision": "forged" if verdict.decision else "original",
                "votes": verdict.votes.tolist(),
                "probs": [[round(float(p), 6) for p in row] for row in verdict.probs],
                "n_stacks": args.stacks, "seed": args.seed}

    threads = int(os.environ.get("FRUCFORGE_THREADS", "1"))
    if threads > 1 and len(args.videos) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_one, args.videos))
    else:
        records = [run_one(p) for p in args.videos]
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for record in records:
            out.write(json.dumps(record) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_localize(args) -> int:
    net = _load_net(args.checkpoint)
    vid = videomod.read_y4m(args.infile)
    _, frame_scores = traineval.localize(net, vid)
    write_series_csv(args.out_csv, frame_scores)
    if args.out_svg:
        write_score_svg(args.out_svg, frame_scores, threshold=args.threshold)
    above = int(np.sum(frame_scores >= args.threshold))
    print(f"{args.infile}: {len(frame_scores)} frames, "
          f"{above} at or above threshold {args.threshold}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise FrucError(f"cannot read manifest {args.manifest}: {exc.strerror}")
    if not rows:
        raise FrucError(f"{args.manifest}: empty manifest")
    cols = rows[0].keys()
    label_col = next((c for c in cols if c and "label" in c.lower()), None)
    pred_col = next((c for c in cols if c and "pred" in c.lower()), None)
    if label_col is None or pred_col is None:
        raise FrucError(f"{args.manifest}: need a label column and a prediction column, "
                        f"found {sorted(c for c in cols if c)}")
    try:
        labels = [int(r[label_col]) for r in rows]
        preds = [int(r[pred_col]) for r in rows]
    except (TypeError, ValueError):
        raise FrucError(f"{args.manifest}: labels and predictions must be 0/1")
    report = traineval.compute_metrics(preds, labels)
    print(_metrics_text(report))
    if args.out:
        write_metrics_csv(args.out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="frucforge",
                     description="Frame-rate up-conversion forgery and detection toolkit")
    parser.add_argument("--version", action="version", version=f"frucforge {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    submap = {}

    def sub(name, help_, func):
        p = subs.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", type=str, default=None,
                       help="key=value file providing flag defaults")
        p.add_argument("--seed", type=int, default=0)
        submap[name] = p
        return p

    p = sub("forge", "up-convert a Y4M video with NNI/BI/MCI", cmd_forge)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=interp.SCHEMES, required=True)
    p.add_argument("--src-fps", type=Fraction, default=None,
                   help="override the source frame rate from the file header")
    p.add_argument("--dst-fps", type=Fraction, required=True)
    p.add_argument("--block", type=int, default=interp.DEFAULT_BLOCK_SIZE)
    p.add_argument("--search", type=int, default=interp.DEFAULT_SEARCH_RANGE)
    p.add_argument("--mask", default=None, help="write the per-frame forged mask CSV here")
    p.add_argument("--reencode-cmd", default=None,
                   help="external encoder template with {in} and {out} Y4M paths")

    p = sub("dataset", "build a paired synthetic stack cache", cmd_dataset)
    p.add_argument("--videos", type=int, default=36)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--frames", type=int, default=24, help="source frames per video")
    p.add_argument("--stacks-per-video", type=int, default=2)
    p.add_argument("--out", required=True, help="output directory")

    p = sub("train", "train a detector on stack caches", cmd_train)
    p.add_argument("caches", nargs="+", help="stack cache files")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True, help="output directory")

    p = sub("detect", "classify videos as original or forged", cmd_detect)
    p.add_argument("videos", nargs="+", help="Y4M files to analyse")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stacks", type=int, default=9)
    p.add_argument("--out", default=None, help="JSON-lines output (default stdout)")

    p = sub("localize", "per-frame forged scores over a sliding window", cmd_localize)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-svg", default=None)

    p = sub("report", "metrics table from a labeled prediction manifest", cmd_report)
    p.add_argument("manifest", help="CSV with label and prediction columns")
    p.add_argument("--out", default=None, help="also write the metrics as CSV here")

    return parser, submap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, submap = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.config:
            args = _apply_config(parser, submap[args.command], args, argv, args.config)
        return args.func(args)
    except UsageError as exc:
        print(f"frucforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FrucError as exc:
        print(f"frucforge: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"frucforge: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
