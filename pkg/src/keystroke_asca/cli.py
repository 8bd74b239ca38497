"""Command-line entry point: ``keystroke-asca <subcommand> ...``.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import features, metrics, pipeline, synth, training
from .config import DESCRIPTIONS, EXTRA_KEYS, TABLE_KEYS, ExperimentConfig, format_config, load_config
from .errors import ConfigError, IoError, KeystrokeError
from .isolation import IsolationTrace
from .layout import KEYS
from .nn.model import Classifier, ModelConfig

log = logging.getLogger("keystroke_asca")


def _config_epilog():
    lines = ["config file: one 'Key = Value' per line, '#' starts a comment.", "", "model/data keys:"]
    lines += [f"  {k:<26} {DESCRIPTIONS[k]}" for k in TABLE_KEYS]
    lines += ["", "corpus, split and isolation keys:"]
    lines += [f"  {k:<26} {DESCRIPTIONS[k]}" for k in EXTRA_KEYS]
    return "\n".join(lines)


def _write_json(path, obj):
    try:
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{path} is not valid JSON: {exc}") from exc


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return Path(path)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_data(path):
    """(array, labels) from a segment or spectrogram store."""
    arr, side = features.read_store(path)
    labels = side.get("labels")
    if labels is None or any(v is None or v < 0 for v in labels):
        raise KeystrokeError(f"{path}: every item needs a label for training/evaluation")
    return arr, np.asarray(labels, dtype=np.int64), side


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    man = synth.build_corpus(cfg.corpus, args.out, cfg.zoom_severity, cfg.fake_rate)
    print(f"wrote {len(man['files'])} recordings to {args.out}")


def cmd_isolate(args, cfg):
    params = cfg.isolation
    if args.target is not None:
        params = replace(params, target_count=args.target)
    if args.prominence is not None:
        params = replace(params, initial_prominence=args.prominence)
    recs = pipeline.load_recordings(args.input)
    if args.label is not None:
        for r in recs:
            r.label = args.label
    if args.trace and args.adaptive and len(recs) == 1:
        trace = IsolationTrace()
        try:
            segs = pipeline.isolate_recording(recs[0].clip, params, True, recs[0].label, trace=trace)
        finally:
            trace.to_csv(args.trace)
        X = np.stack([s.samples for s in segs]) if segs else np.zeros((0, 14400), np.float32)
        y = np.array([-1 if s.label is None else s.label for s in segs])
        rows = [{"recording": recs[0].name, "count": len(segs), "peaks": [s.peak_sample for s in segs]}]
    else:
        X, y, rows = pipeline.isolate_all(recs, params, args.adaptive)
    labels = [None if v < 0 else int(v) for v in y]
    features.write_store(args.out, X, labels, kind="segments", recordings=rows, adaptive=bool(args.adaptive),
                         isolation=asdict(params), seed=cfg.seed)
    print(f"isolated {len(X)} segments from {len(recs)} recording(s)")


def cmd_featurize(args, cfg):
    X, side = features.read_store(args.input)
    if X.ndim != 2:
        raise KeystrokeError(f"{args.input} does not hold (N, samples) segments")
    specs = training.featurize_all(X, cfg.mel)[:, 0] if len(X) else np.zeros((0, cfg.mel.n_mels, 64), np.float32)
    features.write_store(args.out, specs, side.get("labels"), kind="spectrograms",
                         **pipeline.spectrogram_store_meta(cfg))
    if args.png_dir:
        out = _mkdir(args.png_dir)
        for i, s in enumerate(specs):
            features.save_png(s, out / f"spec_{i:04d}.png")
    print(f"wrote {len(specs)} spectrograms")


def cmd_train(args, cfg):
    run = cfg.run if args.max_lr is None else replace(cfg.run, max_lr=args.max_lr)
    X, y, _ = _read_data(args.data)
    out = _mkdir(args.out)
    tr, va, te = training.split_dataset(y, cfg.split)
    _write_json(out / "split.json", {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist(),
                                     "spec": asdict(cfg.split)})
    model = Classifier(seed=cfg.seed, config=_model_config(X, cfg))
    best, hist = training.train(model, (X[tr], y[tr]), (X[va], y[va]), run, cfg.mel, cfg.augment)
    best.save(out / "best.ckpt")
    model.save(out / "final.ckpt")
    hist.to_csv(out / "history.csv")
    _write_json(out / "train.json", {"peak_val_accuracy": hist.peak_val_accuracy, "peak_epoch": hist.peak_epoch,
                                     "final_train_accuracy": hist.train_accuracy[-1], "epochs": run.epochs,
                                     "max_lr": run.max_lr, "seed": cfg.seed})
    (out / "config.txt").write_text(format_config(replace(cfg, run=run)))
    print(f"peak validation accuracy {hist.peak_val_accuracy} at epoch {hist.peak_epoch}")


def _model_config(X, cfg):
    mels = X.shape[1] if X.ndim == 3 else cfg.mel.n_mels
    return ModelConfig(input_shape=(1, mels, 64))


def cmd_eval(args, cfg):
    X, y, _ = _read_data(args.data)
    if args.split:
        idx = np.asarray(_read_json(args.split)[args.subset], dtype=np.int64)
        X, y = X[idx], y[idx]
    model = Classifier.load(args.checkpoint)
    ev = training.evaluate(model, X, y, cfg.mel)
    out = _mkdir(args.out)
    metrics.write_confusion_csv(ev.confusion, out / "confusion.csv")
    metrics.save_confusion_png(ev.confusion, out / "confusion.png")
    (out / "classification_report.txt").write_text(ev.report.as_text())
    nm = ev.near_miss
    _write_json(out / "metrics.json", {
        "n": int(len(y)), "accuracy": ev.report.accuracy, "top1": ev.top1, "top5": ev.top5,
        "macro": ev.report.macro, "weighted": ev.report.weighted,
        "near_miss": None if nm is None else {"histogram": {str(k): v for k, v in nm.histogram.items()},
                                              "total_errors": nm.total_errors, "within_1": nm.within_1,
                                              "within_2": nm.within_2},
        "checkpoint": Path(args.checkpoint).name,
    })
    with open(out / "predictions.csv", "w") as fh:
        fh.write("index,true,top1,top5\n")
        for i, (t, row) in enumerate(zip(y, ev.topk)):
            fh.write(f"{i},{KEYS[t]},{KEYS[row[0]]},{''.join(KEYS[c] for c in row)}\n")
    print(f"top-1 {ev.top1:.4f}  top-5 {ev.top5:.4f}  on {len(y)} items")


def cmd_report(args, cfg):
    ev_dir = Path(args.eval)
    m = _read_json(ev_dir / "metrics.json")
    try:
        report_text = (ev_dir / "classification_report.txt").read_text()
    except OSError as exc:
        raise IoError(f"cannot read classification report: {exc}") from exc
    lines = ["Keystroke classification report", "", f"test items: {m['n']}",
             f"accuracy: {m['accuracy']:.4f}", f"top-5 accuracy: {m['top5']:.4f}"]
    if m.get("near_miss"):
        nm = m["near_miss"]
        lines.append(f"errors within 1 key: {nm['within_1']:.4f}; within 2 keys: {nm['within_2']:.4f}")
    if args.history:
        rows = Path(args.history).read_text().splitlines()[1:]
        vals = [(int(r.split(",")[0]), float(r.split(",")[3])) for r in rows if r.split(",")[3]]
        if vals:
            epoch, acc = max(vals, key=lambda t: (t[1], -t[0]))
            lines.append(f"peak validation accuracy: {acc:.4f} (epoch {epoch})")
        lines.append(f"history: {Path(args.history).name}")
    lines += [f"confusion matrix: {ev_dir.name}/confusion.csv", "", report_text]
    try:
        Path(args.out).write_text("\n".join(lines))
    except OSError as exc:
        raise IoError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {args.out}")


# -- parser -------------------------------------------------------------------

def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="keystroke-asca", description="Acoustic keystroke classification pipeline.",
                                     epilog=_config_epilog(), formatter_class=fmt)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config's Seed")
    common.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=_config_epilog(), formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write the synthetic corpus (WAVs + manifest.json)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("isolate", cmd_isolate, "cut recordings into labelled 14400-sample segments")
    p.add_argument("--input", required=True, help="corpus directory with manifest.json, or one WAV file")
    p.add_argument("--out", required=True, help="segment store path (writes .f32 and .json)")
    p.add_argument("--adaptive", action="store_true", help="search the prominence threshold for --target peaks")
    p.add_argument("--target", type=int, help="keystrokes per recording (overrides Target Keystrokes)")
    p.add_argument("--prominence", type=float, help="threshold or search start (overrides Initial Prominence)")
    p.add_argument("--label", type=int, help="class for every segment of a single WAV input")
    p.add_argument("--trace", help="CSV of the adaptive search (single-recording input)")

    p = add("featurize", cmd_featurize, "log-mel spectrogram store from a segment store")
    p.add_argument("--input", required=True, help="segment store")
    p.add_argument("--out", required=True, help="spectrogram store path")
    p.add_argument("--png-dir", help="also export one grayscale PNG per spectrogram")

    p = add("train", cmd_train, "split, train, and write best/final checkpoints and history")
    p.add_argument("--data", required=True, help="segment store (full augmentation) or spectrogram store")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-lr", type=float, help="override Max Learning Rate (e.g. 1e-3 for the instability probe)")

    p = add("eval", cmd_eval, "evaluate a checkpoint: confusion matrix, report, metrics")
    p.add_argument("--data", required=True, help="segment or spectrogram store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split.json written by train")
    p.add_argument("--subset", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="output directory")

    p = add("report", cmd_report, "plain-text summary of an evaluation")
    p.add_argument("--eval", required=True, help="directory written by eval")
    p.add_argument("--history", help="history.csv written by train")
    p.add_argument("--out", required=True, help="report file")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_cfg(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeystrokeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
