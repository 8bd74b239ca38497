"""Deterministic synthetic keystroke recordings.

Each key class owns a signature of three resonances placed on distinct mel
bands.  A press is a decaying "push" transient followed by a quieter
"release" copy.  A recording strings ``presses_per_key`` presses of one key
together with jittered gaps over a white noise floor.  The resonances are
deliberately separable: the corpus exists to exercise the pipeline, not to
mimic how hard real keyboards are to tell apart.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, save_wav
from .errors import ConfigError, IoError
from .features import hz_to_mel, mel_to_hz
from .isolation import SEGMENT_LEN
from .layout import KEYS

SAMPLE_RATE = 44100
F_LOW, F_HIGH = 400.0, 8000.0
_SIGNATURE_STREAM = 0x5EED
_RECORDING_STREAM = 0xC0DE


@dataclass(frozen=True)
class KeySignature:
    key_class: int
    frequencies: tuple
    release_ratio: float
    release_delay: float
    decay: float = 0.012
    amplitude: float = 0.1
    push_phases: tuple = (0.0, 0.0, 0.0)
    release_phases: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CorpusSpec:
    n_keys: int = 36
    presses_per_key: int = 25
    gap: float = 0.55
    gap_jitter: float = 0.12
    noise_floor: float = 0.001
    seed: int = 0
    take: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 1 <= self.n_keys <= len(KEYS):
            raise ConfigError(f"n_keys must be in [1, {len(KEYS)}]")
        if self.presses_per_key < 1:
            raise ConfigError("presses_per_key must be at least 1")
        if not 0.0 <= self.gap_jitter < 1.0:
            raise ConfigError("gap_jitter must lie in [0, 1)")
        if self.noise_floor < 0:
            raise ConfigError("noise_floor must be non-negative")
        min_gap = self.gap * (1.0 - self.gap_jitter)
        seg_dur = SEGMENT_LEN / self.sample_rate
        if min_gap <= seg_dur:
            raise ConfigError(f"shortest gap {min_gap:.3f} s does not exceed the {seg_dur:.3f} s segment")


def _band_grid():
    """Centre frequencies of every other 64-band mel filter inside [F_LOW, F_HIGH]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2.0), 66))
    centres = edges[1:-1]
    inside = centres[(centres >= F_LOW) & (centres <= F_HIGH)]
    return inside[::2]


def key_signature(seed, key_class, n_keys=36) -> KeySignature:
    """Signature of ``key_class`` on the keyboard identified by ``seed``.

    Resonance triples are a seeded draw without replacement from all band
    triples, so two classes never share the same triple.
    """
    grid = _band_grid()
    combos = list(itertools.combinations(range(len(grid)), 3))
    order = np.random.default_rng([seed, _SIGNATURE_STREAM]).permutation(len(combos))
    if not 0 <= key_class < n_keys:
        raise ConfigError(f"key class {key_class} out of range")
    triple = combos[order[key_class]]
    rng = np.random.default_rng([seed, _SIGNATURE_STREAM, key_class])
    return KeySignature(
        key_class=int(key_class),
        frequencies=tuple(float(grid[i]) for i in triple),
        release_ratio=float(rng.uniform(0.08, 0.12)),
        release_delay=float(rng.uniform(0.08, 0.15)),
        decay=float(rng.uniform(0.010, 0.016)),
        push_phases=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, 3)),
        release_phases=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, 3)),
    )


def keyboard(seed, n_keys=36):
    return [key_signature(seed, c, n_keys) for c in range(n_keys)]


def _transient(freqs, amps, phases, decay, n, rate):
    t = np.arange(n) / rate
    env = np.exp(-t / decay) * np.minimum(1.0, t / 0.0005)
    out = np.zeros(n)
    for f, a, ph in zip(freqs, amps, phases):
        out += a * np.sin(2.0 * np.pi * f * t + ph)
    return out * env


def synth_keystroke(sig: KeySignature, rng, noise_floor=0.0, amplitude_jitter=0.2, frequency_jitter=0.01,
                    sample_rate=SAMPLE_RATE) -> np.ndarray:
    """One press (push at sample 0, release after ``release_delay``), SEGMENT_LEN samples.

    With both jitters and the noise floor at 0 the result is the signature's
    fixed template and ``rng`` is not consumed.
    """
    n = SEGMENT_LEN
    gain = 1.0 + rng.uniform(-amplitude_jitter, amplitude_jitter) if amplitude_jitter else 1.0
    freqs = np.array(sig.frequencies)
    if frequency_jitter:
        freqs = freqs * (1.0 + rng.uniform(-frequency_jitter, frequency_jitter, size=len(freqs)))
    amps = sig.amplitude * gain * np.ones(len(freqs))
    push = _transient(freqs, amps, sig.push_phases, sig.decay, n, sample_rate)
    d = int(round(sig.release_delay * sample_rate))
    release = np.zeros(n)
    release[d:] = sig.release_ratio * _transient(freqs, amps, sig.release_phases, sig.decay, n - d, sample_rate)
    wave = push + release
    if noise_floor:
        wave = wave + noise_floor * rng.standard_normal(n)
    return wave


def synth_recording(spec: CorpusSpec, key_class) -> tuple[AudioClip, np.ndarray]:
    """All presses of one key in a single clip, plus the exact push onsets (samples)."""
    rate = spec.sample_rate
    sig = key_signature(spec.seed, key_class, spec.n_keys)
    rng = np.random.default_rng([spec.seed, _RECORDING_STREAM, spec.take, key_class])
    onsets = []
    t = 0.3 + rng.uniform(0.0, 0.1)
    for _ in range(spec.presses_per_key):
        onsets.append(int(round(t * rate)))
        t += spec.gap * (1.0 + rng.uniform(-spec.gap_jitter, spec.gap_jitter))
    total = onsets[-1] + SEGMENT_LEN + int(0.3 * rate)
    x = spec.noise_floor * rng.standard_normal(total)
    for onset in onsets:
        x[onset : onset + SEGMENT_LEN] += synth_keystroke(sig, rng, 0.0, sample_rate=rate)
    return AudioClip(x.astype(np.float32), rate), np.array(onsets, dtype=np.int64)


def _lowpass_residual(x, rate, cutoff=16000.0):
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    spec[freqs <= cutoff] = 0.0
    return np.fft.irfft(spec, n=len(x))


def zoom_degrade(clip: AudioClip, rng, severity=0.8, knot_spacing=0.5) -> AudioClip:
    """Emulate conferencing-app processing: gain riding, tanh compression, band-limit.

    Gain follows a piecewise-linear random curve 1 - severity*u(t), u in [0, 1],
    with knots every ``knot_spacing`` seconds.  Content above 16 kHz is
    attenuated by ``severity`` and a final limiter keeps the output peak at or
    below the input peak.  Length and rate are unchanged.
    """
    if not 0.0 <= severity <= 1.0:
        raise ConfigError("severity must lie in [0, 1]")
    x = np.asarray(clip.samples[:, 0] if clip.channels == 1 else clip.samples.mean(axis=1), dtype=np.float64)
    if severity == 0.0:
        return AudioClip(x.astype(np.float32), clip.sample_rate)
    rate = clip.sample_rate
    y = x - severity * _lowpass_residual(x, rate)
    n_knots = int(np.ceil(len(x) / (knot_spacing * rate))) + 2
    knots = rng.uniform(0.0, 1.0, n_knots)
    pos = np.arange(len(x)) / (knot_spacing * rate)
    gain = 1.0 - severity * np.interp(pos, np.arange(n_knots), knots)
    y = y * gain
    drive = 4.0 * severity
    y = np.tanh(drive * y) / drive
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > peak_in > 0:
        y *= peak_in / peak_out
    return AudioClip(y.astype(np.float32), rate)


def inject_fake_keystrokes(clip: AudioClip, rng, rate=2.0, signatures=None, seed=0):
    """Superimpose random-class keystrokes at Poisson-process times.

    Returns (clip, injected_onsets).  ``signatures`` defaults to the keyboard
    of ``seed``, so the fakes sound like real keys of the same board.
    """
    if rate < 0:
        raise ConfigError("rate must be non-negative")
    if rate == 0:
        return clip, np.zeros(0, dtype=np.int64)
    sigs = signatures if signatures is not None else keyboard(seed)
    x = np.array(clip.samples[:, 0], dtype=np.float64)
    duration = len(x) / clip.sample_rate
    count = int(rng.poisson(rate * duration))
    onsets = np.sort(rng.integers(0, len(x), size=count))
    for onset in onsets:
        sig = sigs[int(rng.integers(len(sigs)))]
        wave = synth_keystroke(sig, rng, 0.0, sample_rate=clip.sample_rate)
        end = min(len(x), onset + SEGMENT_LEN)
        x[onset:end] += wave[: end - onset]
    return AudioClip(x.astype(np.float32), clip.sample_rate), onsets.astype(np.int64)


def degradation_rng(seed, take, key_class):
    """Generator for the post-processing (degradation, injection) of one recording."""
    return np.random.default_rng([seed, _RECORDING_STREAM, take, key_class, 1])


def generate_corpus(spec: CorpusSpec = CorpusSpec()):
    """In-memory corpus: list of (class, clip, onsets)."""
    return [(c, *synth_recording(spec, c)) for c in range(spec.n_keys)]


def build_corpus(spec: CorpusSpec, out_dir, severity=0.0, fake_rate=0.0):
    """Write one float-32 WAV per key plus ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    files = []
    for c, clip, onsets in generate_corpus(spec):
        post_rng = degradation_rng(spec.seed, spec.take, c)
        if severity:
            clip = zoom_degrade(clip, post_rng, severity)
        fakes = []
        if fake_rate:
            clip, fakes = inject_fake_keystrokes(clip, post_rng, fake_rate, seed=spec.seed)
        name = f"key_{c:02d}_{KEYS[c]}.wav"
        save_wav(clip, out / name)
        files.append({"path": name, "class": c, "key": KEYS[c], "onsets": [int(o) for o in onsets],
                      "fake_onsets": [int(o) for o in fakes]})
    manifest = {"files": files, "spec": asdict(spec), "seed": spec.seed,
                "severity": severity, "fake_rate": fake_rate}
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc
    return manifest
