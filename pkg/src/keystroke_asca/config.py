"""Flat ``Key = Value`` experiment configuration.

The first block of keys holds the model and data hyperparameters; the
remaining keys cover the synthetic corpus and the isolation search.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError, IoError
from .features import AugmentConfig, MelConfig
from .isolation import IsolationParams
from .synth import CorpusSpec
from .training import RunConfig, SplitSpec

TABLE_KEYS = (
    "Epochs", "Batch Size", "Loss Type", "Optimiser", "Max Learning Rate", "Annealing Schedule",
    "Timeshift Percentage", "Max Mask Percentage", "Number of Masks Per Axis", "Mel Bands",
    "FFT Window Size", "Hop Length", "Data Split", "Normalised Data",
)
EXTRA_KEYS = (
    "Seed", "Split Fractions", "Validate Every", "Adam Betas", "Adam Epsilon",
    "Keys", "Presses Per Key", "Press Gap", "Gap Jitter", "Noise Floor", "Recording Take",
    "Zoom Severity", "Fake Keystroke Rate",
    "Initial Prominence", "Prominence Step", "Target Keystrokes", "Step Decay", "Max Iterations",
)

DESCRIPTIONS = {
    "Epochs": "training epochs (1100)",
    "Batch Size": "mini-batch size (16)",
    "Loss Type": "must be 'Cross Entropy'",
    "Optimiser": "must be 'Adam'",
    "Max Learning Rate": "starting learning rate of the linear schedule (5e-4)",
    "Annealing Schedule": "must be 'Linear'",
    "Timeshift Percentage": "max random time shift as a fraction of the segment (0.4)",
    "Max Mask Percentage": "max mask width as a fraction of each spectrogram axis (0.1)",
    "Number of Masks Per Axis": "masks drawn on each of the time and frequency axes (2)",
    "Mel Bands": "mel filters (64)",
    "FFT Window Size": "STFT window length in samples (1024)",
    "Hop Length": "STFT hop in samples (225)",
    "Data Split": "'Random' or 'Stratified'",
    "Normalised Data": "must be 'Yes' (per-spectrogram standardisation)",
    "Seed": "master seed for corpus, split, init, shuffling and augmentation",
    "Split Fractions": "train/val/test fractions, e.g. 0.7/0.1/0.2",
    "Validate Every": "epochs between validation passes (5)",
    "Adam Betas": "beta1/beta2, e.g. 0.9/0.999",
    "Adam Epsilon": "Adam denominator epsilon (1e-8)",
    "Keys": "number of key classes in the synthetic corpus (36)",
    "Presses Per Key": "presses per recording (25)",
    "Press Gap": "mean seconds between presses",
    "Gap Jitter": "relative jitter of the press gap",
    "Noise Floor": "white-noise standard deviation",
    "Recording Take": "recording session index (same keyboard, new presses)",
    "Zoom Severity": "conferencing degradation severity in [0, 1] (0 = off)",
    "Fake Keystroke Rate": "injected fake keystrokes per second (0 = off)",
    "Initial Prominence": "isolation prominence threshold (start value for the adaptive search)",
    "Prominence Step": "initial step of the adaptive search",
    "Target Keystrokes": "keystrokes expected per recording",
    "Step Decay": "per-iteration step multiplier of the adaptive search (0.99)",
    "Max Iterations": "iteration cap of the adaptive search",
}

_FIXED = {"Loss Type": "cross entropy", "Optimiser": "adam", "Annealing Schedule": "linear", "Normalised Data": "yes"}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    isolation: IsolationParams = field(default_factory=lambda: IsolationParams(70.0, 10.0))
    zoom_severity: float = 0.0
    fake_rate: float = 0.0

    @property
    def seed(self):
        return self.run.seed

    def with_seed(self, seed):
        return replace(
            self,
            run=replace(self.run, seed=seed),
            split=replace(self.split, seed=seed),
            corpus=replace(self.corpus, seed=seed),
        )


def _pair(value, n, key):
    parts = [p.strip() for p in value.replace(",", "/").split("/")]
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} values separated by '/'")
    return tuple(float(p) for p in parts)


def parse_config(text) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'Key = Value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TABLE_KEYS and key not in EXTRA_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        raw[key] = value
    for key, expected in _FIXED.items():
        if key in raw and raw[key].lower() != expected:
            raise ConfigError(f"{key} = {raw[key]!r} is not supported (only {expected!r})")
    try:
        return _build(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build(raw) -> ExperimentConfig:
    d = ExperimentConfig()
    get = raw.get
    seed = int(get("Seed", d.run.seed))
    run = RunConfig(
        epochs=int(get("Epochs", d.run.epochs)),
        batch_size=int(get("Batch Size", d.run.batch_size)),
        max_lr=float(get("Max Learning Rate", d.run.max_lr)),
        betas=_pair(get("Adam Betas"), 2, "Adam Betas") if "Adam Betas" in raw else d.run.betas,
        eps=float(get("Adam Epsilon", d.run.eps)),
        validate_every=int(get("Validate Every", d.run.validate_every)),
        seed=seed,
    )
    mel = MelConfig(n_mels=int(get("Mel Bands", 64)), n_fft=int(get("FFT Window Size", 1024)), hop=int(get("Hop Length", 225)))
    aug = AugmentConfig(
        max_shift_fraction=float(get("Timeshift Percentage", 0.4)),
        mask_fraction=float(get("Max Mask Percentage", 0.1)),
        masks_per_axis=int(get("Number of Masks Per Axis", 2)),
    )
    fractions = _pair(get("Split Fractions"), 3, "Split Fractions") if "Split Fractions" in raw else (0.7, 0.1, 0.2)
    mode = get("Data Split", "Random").lower()
    split = SplitSpec(mode, *fractions, seed=seed)
    dc = d.corpus
    corpus = CorpusSpec(
        n_keys=int(get("Keys", dc.n_keys)),
        presses_per_key=int(get("Presses Per Key", dc.presses_per_key)),
        gap=float(get("Press Gap", dc.gap)),
        gap_jitter=float(get("Gap Jitter", dc.gap_jitter)),
        noise_floor=float(get("Noise Floor", dc.noise_floor)),
        seed=seed,
        take=int(get("Recording Take", dc.take)),
    )
    di = d.isolation
    iso = IsolationParams(
        initial_prominence=float(get("Initial Prominence", di.initial_prominence)),
        step=float(get("Prominence Step", di.step)),
        target_count=int(get("Target Keystrokes", corpus.presses_per_key)),
        step_decay=float(get("Step Decay", di.step_decay)),
        max_iterations=int(get("Max Iterations", di.max_iterations)),
    )
    return ExperimentConfig(run, mel, aug, split, corpus, iso,
                            zoom_severity=float(get("Zoom Severity", 0.0)),
                            fake_rate=float(get("Fake Keystroke Rate", 0.0)))


def format_config(cfg: ExperimentConfig) -> str:
    r, m, a, s, c, i = cfg.run, cfg.mel, cfg.augment, cfg.split, cfg.corpus, cfg.isolation
    rows = [
        ("Epochs", r.epochs), ("Batch Size", r.batch_size), ("Loss Type", "Cross Entropy"),
        ("Optimiser", "Adam"), ("Max Learning Rate", r.max_lr), ("Annealing Schedule", "Linear"),
        ("Timeshift Percentage", a.max_shift_fraction), ("Max Mask Percentage", a.mask_fraction),
        ("Number of Masks Per Axis", a.masks_per_axis), ("Mel Bands", m.n_mels),
        ("FFT Window Size", m.n_fft), ("Hop Length", m.hop), ("Data Split", s.mode.capitalize()),
        ("Normalised Data", "Yes"), ("Seed", r.seed),
        ("Split Fractions", f"{s.train_fraction}/{s.val_fraction}/{s.test_fraction}"),
        ("Validate Every", r.validate_every), ("Adam Betas", f"{r.betas[0]}/{r.betas[1]}"),
        ("Adam Epsilon", r.eps), ("Keys", c.n_keys), ("Presses Per Key", c.presses_per_key),
        ("Press Gap", c.gap), ("Gap Jitter", c.gap_jitter), ("Noise Floor", c.noise_floor),
        ("Recording Take", c.take), ("Zoom Severity", cfg.zoom_severity),
        ("Fake Keystroke Rate", cfg.fake_rate), ("Initial Prominence", i.initial_prominence),
        ("Prominence Step", i.step), ("Target Keystrokes", i.target_count),
        ("Step Decay", i.step_decay), ("Max Iterations", i.max_iterations),
    ]
    return "".join(f"{k} = {v}\n" for k, v in rows)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
