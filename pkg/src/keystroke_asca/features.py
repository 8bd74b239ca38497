"""Log-mel spectrogram features, SpecAugment-style augmentation, tensor store."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError, LabelError, ResolutionError, SampleRateError, ShapeError
from .isolation import SEGMENT_LEN, Segment, hann_window

N_FRAMES = 64
EXPECTED_RATE = 44100


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    n_fft: int = 1024
    hop: int = 225
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist
    power: float = 2.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be at least 1")
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError("n_fft must be a power of two")
        if self.hop < 1:
            raise ConfigError("hop must be at least 1")
        if self.f_max is not None and self.f_min >= self.f_max:
            raise ConfigError("f_min must be below f_max")

    def upper(self, sample_rate):
        return sample_rate / 2.0 if self.f_max is None else float(self.f_max)


@dataclass(frozen=True)
class AugmentConfig:
    max_shift_fraction: float = 0.4
    mask_fraction: float = 0.1
    masks_per_axis: int = 2

    def __post_init__(self):
        if not 0.0 <= self.max_shift_fraction < 1.0:
            raise ConfigError("max_shift_fraction must lie in [0, 1)")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in [0, 1)")
        if self.masks_per_axis < 0:
            raise ConfigError("masks_per_axis must be non-negative")


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """(n_mels, frames) log-mel image; row 0 is the lowest band."""

    values: np.ndarray
    label: int | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, sample_rate) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak height 1."""
    f_hi = cfg.upper(sample_rate)
    if cfg.f_min >= f_hi:
        raise ConfigError("f_min must be below f_max")
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = sample_rate / cfg.n_fft
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_hi), cfg.n_mels + 2))
    if np.min(edges[2:] - edges[:-2]) < bin_hz:
        raise ResolutionError(f"{cfg.n_mels} mel bands are too narrow for a {cfg.n_fft}-point FFT at {sample_rate} Hz")
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.max(axis=1) <= 0.0):
        raise ResolutionError("a mel filter covers no FFT bin")
    return fb


def _check_rate(sample_rate):
    if sample_rate != EXPECTED_RATE:
        raise SampleRateError(f"features expect {EXPECTED_RATE} Hz audio, got {sample_rate} Hz (no resampling)")


def stft_power(x, n_fft, hop, power=2.0):
    """Centered (reflect-padded) Hann STFT power; x is (..., samples) -> (..., frames, bins)."""
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x, widths, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft, axis=-1)[..., ::hop, :]
    spec = np.abs(np.fft.rfft(frames * hann_window(n_fft), axis=-1))
    return spec**power


def log_mel(x, cfg: MelConfig, sample_rate, n_frames=N_FRAMES):
    """Batched log-mel of (..., samples) waveforms -> (..., n_mels, n_frames)."""
    fb = mel_filterbank(cfg, sample_rate)
    power = stft_power(x, cfg.n_fft, cfg.hop, cfg.power)
    mel = power @ fb.T  # (..., frames, n_mels)
    db = 10.0 * np.log10(np.maximum(mel, cfg.log_floor))
    db = np.swapaxes(db, -1, -2)
    T = db.shape[-1]
    if T >= n_frames:
        db = db[..., :n_frames]
    else:
        widths = [(0, 0)] * (db.ndim - 1) + [(0, n_frames - T)]
        db = np.pad(db, widths, constant_values=10.0 * np.log10(cfg.log_floor))
    return db


def mel_spectrogram(seg: Segment, cfg: MelConfig = MelConfig(), sample_rate=EXPECTED_RATE) -> Spectrogram:
    _check_rate(sample_rate)
    if len(seg.samples) != SEGMENT_LEN:
        raise ShapeError(f"segment must hold {SEGMENT_LEN} samples, got {len(seg.samples)}")
    return Spectrogram(log_mel(seg.samples, cfg, sample_rate), seg.label)


def draw_shift(rng, max_fraction, length):
    bound = int(np.floor(max_fraction * length))
    return int(rng.integers(-bound, bound + 1)) if bound else 0


def shift_samples(x, k):
    """out[i] = x[i - k] where that index exists, 0 elsewhere."""
    out = np.zeros_like(x)
    n = x.shape[-1]
    if abs(k) >= n:
        return out
    if k >= 0:
        out[..., k:] = x[..., : n - k]
    else:
        out[..., : n + k] = x[..., -k:]
    return out


def time_shift(seg: Segment, rng, max_fraction=0.4, shift=None) -> Segment:
    """Randomly delay (k > 0) or advance the waveform, zero-filling the gap."""
    k = draw_shift(rng, max_fraction, len(seg.samples)) if shift is None else int(shift)
    if k == 0:
        return seg
    return Segment(shift_samples(seg.samples, k), seg.peak_sample, seg.label)


def draw_masks(rng, shape, cfg: AugmentConfig):
    """(axis, start, width) bands: time masks first, then frequency masks."""
    bands = []
    for axis in (1, 0):
        n = shape[axis]
        max_w = int(np.floor(cfg.mask_fraction * n))
        for _ in range(cfg.masks_per_axis):
            w = int(rng.integers(0, max_w + 1))
            start = int(rng.integers(0, n - w + 1))
            bands.append((axis, start, w))
    return bands


def apply_masks(values, bands, fill):
    out = np.array(values, copy=True)
    for axis, start, w in bands:
        if axis == 1:
            out[:, start : start + w] = fill
        else:
            out[start : start + w, :] = fill
    return out


def spec_mask(spec: Spectrogram, rng, cfg: AugmentConfig = AugmentConfig()) -> Spectrogram:
    """Overwrite random time and frequency bands with the pre-mask mean."""
    mu = float(np.mean(spec.values))
    bands = draw_masks(rng, spec.values.shape, cfg)
    return Spectrogram(apply_masks(spec.values, bands, mu), spec.label)


def standardize(values, axis=(-2, -1)):
    values = np.asarray(values, dtype=np.float64)
    mu = values.mean(axis=axis, keepdims=True)
    sd = values.std(axis=axis, keepdims=True)
    safe = np.where(sd < 1e-12, 1.0, sd)
    return np.where(sd < 1e-12, 0.0, (values - mu) / safe)


def normalize(spec: Spectrogram) -> Spectrogram:
    return Spectrogram(standardize(spec.values), spec.label)


def item_rng(seed, *index):
    """Generator for one item, derived only from (seed, index...)."""
    return np.random.default_rng([int(seed), *map(int, index)])


def _base_seed(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def featurize_batch(waves, cfg: MelConfig, sample_rate=EXPECTED_RATE, aug: AugmentConfig | None = None, rngs=None):
    """Pipeline over an (N, samples) array -> float32 (N, n_mels, 64).

    With ``aug`` set, item i draws its shift and masks from ``rngs[i]``.
    """
    _check_rate(sample_rate)
    waves = np.asarray(waves, dtype=np.float32)
    if waves.ndim != 2 or waves.shape[1] != SEGMENT_LEN:
        raise ShapeError(f"expected (N, {SEGMENT_LEN}) segments, got {waves.shape}")
    if aug is not None:
        shifts = [draw_shift(r, aug.max_shift_fraction, SEGMENT_LEN) for r in rngs]
        waves = np.stack([shift_samples(w, k) for w, k in zip(waves, shifts)]) if len(waves) else waves
    specs = log_mel(waves, cfg, sample_rate)
    if aug is not None:
        for i, r in enumerate(rngs):
            bands = draw_masks(r, specs[i].shape, aug)
            specs[i] = apply_masks(specs[i], bands, specs[i].mean())
    return standardize(specs).astype(np.float32)


def build_dataset(segments, cfg: MelConfig = MelConfig(), aug: AugmentConfig = AugmentConfig(), rng=0,
                  augment=False, sample_rate=EXPECTED_RATE) -> list[Spectrogram]:
    """time_shift -> mel_spectrogram -> spec_mask -> normalize, per segment.

    Augmentation randomness for item i comes from ``item_rng(seed, i)`` so the
    output does not depend on processing order.
    """
    for i, s in enumerate(segments):
        if s.label is None:
            raise LabelError(f"segment {i} has no label")
    if not segments:
        return []
    waves = np.stack([s.samples for s in segments])
    rngs = None
    if augment:
        base = _base_seed(rng)
        rngs = [item_rng(base, i) for i in range(len(segments))]
    values = featurize_batch(waves, cfg, sample_rate, aug if augment else None, rngs)
    return [Spectrogram(v, s.label) for v, s in zip(values, segments)]


# -- tensor store -------------------------------------------------------------

def write_store(path, array, labels=None, **meta):
    """Write ``<path>.f32`` (little-endian float32, row-major) and ``<path>.json``."""
    base = Path(path)
    if base.suffix in (".json", ".f32"):
        base = base.with_suffix("")
    arr = np.ascontiguousarray(array, dtype="<f4")
    sidecar = {"shape": list(arr.shape), "dtype": "float32-le", "labels": None if labels is None else [None if l is None else int(l) for l in labels]}
    sidecar.update(meta)
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".f32").write_bytes(arr.tobytes())
        base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write tensor store {base}: {exc}") from exc
    return base


def read_store(path):
    """Return (array, sidecar dict)."""
    base = Path(path)
    if base.suffix in (".json", ".f32"):
        base = base.with_suffix("")
    try:
        sidecar = json.loads(base.with_suffix(".json").read_text())
        raw = base.with_suffix(".f32").read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read tensor store {base}: {exc}") from exc
    shape = tuple(sidecar["shape"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ShapeError(f"store {base} holds {arr.size} values, sidecar declares shape {shape}")
    return arr.reshape(shape).astype(np.float32), sidecar


def mel_config_dict(cfg: MelConfig):
    return asdict(cfg)


def save_png(values, path):
    """Grayscale PNG, min-max scaled, low frequencies at the bottom."""
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi - lo < 1e-12 else (v - lo) / (hi - lo)
    img = np.flipud((scaled * 255.0).round().astype(np.uint8))
    try:
        Image.fromarray(img).save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
