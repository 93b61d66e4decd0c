"""Command-line entry point: synth-data, train, eval, analyze, param-count.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import analysis
from .audio import SYNTH_CLASSES, ManifestRow, load_clips, load_manifest, synth_dataset, write_manifest, write_wav
from .errors import WaveformerError
from .model import VARIANTS, ModelConfig, build, load_checkpoint, param_count
from .training import TrainRunConfig, evaluate, train, write_report_csv

logger = logging.getLogger("waveformer")

CHECKPOINT_NAME = "checkpoint.atfm"
LOG_NAME = "train_log.csv"
LABELS_NAME = "labels.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.csv" if p.is_dir() else p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="waveformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-data", help="write the synthetic 4-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, required=True, help="train clips per class")
    p.add_argument("--val-per-class", type=int, default=0)
    p.add_argument("--eval-per-class", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    def model_flags(p):
        p.add_argument("--size", choices=("small", "large"), default="large")
        p.add_argument("--variant", choices=VARIANTS, default="baseline")

    def data_flags(p):
        p.add_argument("--data", required=True, help="manifest CSV or a directory holding manifest.csv")
        p.add_argument("--manifest-format", choices=("simple", "fsd50k"), default="simple")

    p = sub.add_parser("train", help="train a model")
    data_flags(p)
    model_flags(p)
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--target-map", type=float, default=None, help="stop once val mAP reaches this")

    p = sub.add_parser("eval", help="clip-level mAP of a checkpoint")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=("train", "val", "eval"))
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="export the sorted front-end filterbank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("param-count", help="print the trainable parameter count")
    model_flags(p)
    p.add_argument("--n-labels", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    meta_rows = []
    plan = [("train", args.per_class, args.seed), ("val", args.val_per_class, args.seed + 1),
            ("eval", args.eval_per_class, args.seed + 2)]
    for split, n, seed in plan:
        if n <= 0:
            continue
        for clip in synth_dataset(n, seed, prefix=split):
            name = f"{clip.source_id}.wav"
            write_wav(out / name, clip.samples)
            label = SYNTH_CLASSES[clip.meta["class"]]
            rows.append(ManifestRow(name, (label,), split))
            freq = clip.meta.get("frequency")
            meta_rows.append([name, clip.meta["class"], "" if freq is None else repr(freq)])
    write_manifest(out / "manifest.csv", rows)
    with open(out / "synth_meta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class", "frequency"])
        w.writerows(meta_rows)
    print(f"wrote {len(rows)} clips to {out}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(_manifest_path(args.data), args.manifest_format)
    train_clips = load_clips(manifest, "train")
    val_clips = load_clips(manifest, "val") if manifest.select("val") else None
    config = ModelConfig.preset(args.size, variant=args.variant, n_labels=len(manifest.vocabulary))
    model = build(config, seed=args.seed)
    run = TrainRunConfig(
        batch_size=args.batch,
        max_steps=args.steps,
        learning_rate=args.lr,
        seed=args.seed,
        eval_interval=args.eval_every,
        huber_delta=args.delta,
        target_map=args.target_map,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, train_clips, run, val_clips, out / CHECKPOINT_NAME, out / LOG_NAME)
    (out / LABELS_NAME).write_text("\n".join(manifest.vocabulary) + "\n", encoding="utf-8")
    last = result.log[-1]
    print(f"trained {last.step} steps, final loss {last.loss:.6g}; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_manifest_path(args.data), args.manifest_format)
    labels_file = Path(args.checkpoint).with_name(LABELS_NAME)
    vocab = labels_file.read_text(encoding="utf-8").split() if labels_file.exists() else manifest.vocabulary
    if len(vocab) != model.config.n_labels:
        raise WaveformerError(f"vocabulary has {len(vocab)} labels, model has {model.config.n_labels}")
    clips = load_clips(manifest, args.split, vocab)
    if not clips:
        raise WaveformerError(f"no rows with split {args.split!r}")
    report = evaluate(model, clips)
    write_report_csv(report, args.out, vocab)
    print(f"mAP {report.mAP:.4f} over {int(report.valid.sum())} classes")
    return 0


def cmd_analyze(args) -> int:
    view = analysis.sort_by_peak(analysis.extract_filters(args.checkpoint))
    paths = analysis.export_analysis(view, args.out)
    print(f"{len(view.filters)} filters sorted; wrote {', '.join(p.name for p in paths)}")
    return 0


def cmd_param_count(args) -> int:
    config = ModelConfig.preset(args.size, variant=args.variant, n_labels=args.n_labels)
    print(param_count(build(config, seed=args.seed)))
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "param-count": cmd_param_count,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (WaveformerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
