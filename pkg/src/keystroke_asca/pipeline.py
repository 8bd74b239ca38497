"""Stage glue shared by the CLI, the estimators and the acceptance suite.

Every function here is deterministic given its inputs; nothing records
wall-clock time or absolute paths, so repeated runs produce identical files.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features, isolation, synth, training
from .audio_io import AudioClip, load_wav, to_mono
from .config import ExperimentConfig
from .errors import ConvergenceError, DataError, IoError
from .nn.model import Classifier

log = logging.getLogger(__name__)


@dataclass
class Recording:
    name: str
    clip: AudioClip
    label: int | None
    onsets: list = field(default_factory=list)


def load_recordings(path) -> list[Recording]:
    """A corpus directory (``manifest.json`` + WAVs) or a single WAV file."""
    path = Path(path)
    if path.is_dir():
        manifest_path = path / "manifest.json"
        try:
            manifest = json.loads(manifest_path.read_text())
        except OSError as exc:
            raise IoError(f"cannot read {manifest_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise IoError(f"{manifest_path} is not valid JSON: {exc}") from exc
        return [Recording(f["path"], to_mono(load_wav(path / f["path"])), int(f["class"]), list(f.get("onsets", [])))
                for f in manifest["files"]]
    return [Recording(path.name, to_mono(load_wav(path)), None)]


def degrade(clip: AudioClip, cfg: ExperimentConfig, key_class: int, take=None):
    """Apply the configured conferencing degradation and fake-keystroke injection.

    Returns (clip, injected onsets).  The generator for recording ``key_class``
    depends only on (seed, take, class), matching ``synth.build_corpus``.
    """
    spec = cfg.corpus
    take = spec.take if take is None else take
    rng = synth.degradation_rng(spec.seed, take, key_class)
    if cfg.zoom_severity:
        clip = synth.zoom_degrade(clip, rng, cfg.zoom_severity)
    fakes = np.zeros(0, dtype=np.int64)
    if cfg.fake_rate:
        clip, fakes = synth.inject_fake_keystrokes(clip, rng, cfg.fake_rate, seed=spec.seed)
    return clip, fakes


def isolate_recording(clip, params: isolation.IsolationParams, adaptive, label=None, trace=None, strict=True):
    """Segments of one clip; with ``strict=False`` a failed search returns its closest result."""
    if not adaptive:
        return isolation.isolate_fixed(clip, params.initial_prominence, labels=label)
    try:
        return isolation.isolate_adaptive(clip, params, labels=label, trace=trace)
    except ConvergenceError as exc:
        if strict:
            raise
        log.warning("%s; using the closest result", exc)
        return [s.with_label(label) for s in exc.best]


def isolate_all(recordings, params, adaptive, strict=True):
    """(waveforms (N, 14400), labels (N,), per-recording summary rows)."""
    waves, labels, rows = [], [], []
    for rec in recordings:
        segs = isolate_recording(rec.clip, params, adaptive, rec.label, strict=strict)
        waves += [s.samples for s in segs]
        labels += [-1 if s.label is None else s.label for s in segs]
        rows.append({"recording": rec.name, "count": len(segs), "peaks": [int(s.peak_sample) for s in segs]})
        log.info("%s: %d segments", rec.name, len(segs))
    X = np.stack(waves) if waves else np.zeros((0, isolation.SEGMENT_LEN), dtype=np.float32)
    return X.astype(np.float32), np.asarray(labels, dtype=np.int64), rows


def corpus_segments(cfg: ExperimentConfig, adaptive=None, take=None, strict=True):
    """Generate the configured corpus in memory, degrade it, and isolate.

    ``adaptive`` defaults to on whenever degradation or injection is active.
    """
    spec = cfg.corpus if take is None else replace(cfg.corpus, take=take)
    if adaptive is None:
        adaptive = bool(cfg.zoom_severity or cfg.fake_rate)
    recs = []
    for c, clip, onsets in synth.generate_corpus(spec):
        clip, _ = degrade(clip, cfg, c, spec.take)
        recs.append(Recording(f"key_{c:02d}", clip, c, list(onsets)))
    return isolate_all(recs, cfg.isolation, adaptive, strict=strict)


@dataclass
class AttackResult:
    model: Classifier
    final_model: Classifier
    history: training.TrainHistory
    evaluation: training.Evaluation
    final_evaluation: training.Evaluation
    split: tuple


def run_attack(X, y, cfg: ExperimentConfig) -> AttackResult:
    """Split, train with on-the-fly augmentation, evaluate both checkpoints on the test split."""
    if len(X) == 0:
        raise DataError("no segments to train on")
    tr, va, te = training.split_dataset(y, cfg.split)
    model = Classifier(seed=cfg.seed)
    best, hist = training.train(model, (X[tr], y[tr]), (X[va], y[va]), cfg.run, cfg.mel, cfg.augment)
    ev = training.evaluate(best, X[te], y[te], cfg.mel)
    ev_final = training.evaluate(model, X[te], y[te], cfg.mel)
    return AttackResult(best, model, hist, ev, ev_final, (tr, va, te))


def spectrogram_store_meta(cfg: ExperimentConfig):
    return {"mel_config": features.mel_config_dict(cfg.mel), "seed": cfg.seed}
