"""Keystroke isolation: energy envelope, prominence peaks, fixed-length cuts.

The energy of a frame is the sum of FFT magnitudes of the Hann-windowed
frame.  Keystrokes are the envelope peaks whose topographic prominence clears
a threshold.  ``isolate_adaptive`` searches for the threshold that yields a
known number of presses, shrinking its step geometrically on every pass.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks as _scipy_find_peaks
from scipy.signal import peak_prominences

from .audio_io import AudioClip
from .errors import ChannelError, ConfigError, ConvergenceError, TooShort

SEGMENT_LEN = 14400
FRAME_LEN = 1024
FRAME_HOP = 225
PRE_PEAK_FRACTION = 0.25


@dataclass(frozen=True, eq=False)
class EnergyEnvelope:
    values: np.ndarray
    frame_hop: int
    frame_len: int
    origin_rate: int

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Segment:
    samples: np.ndarray
    peak_sample: int
    label: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError("segment samples must be 1-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("segment samples must be finite")
        object.__setattr__(self, "samples", arr)

    def with_label(self, label):
        return Segment(self.samples, self.peak_sample, label)


@dataclass(frozen=True)
class IsolationParams:
    initial_prominence: float
    step: float
    target_count: int = 25
    step_decay: float = 0.99
    max_iterations: int = 2000

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError("step must be positive")
        if not 0.0 < self.step_decay < 1.0:
            raise ConfigError("step_decay must lie in (0, 1)")
        if self.target_count < 1:
            raise ConfigError("target_count must be at least 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")


@dataclass
class IsolationTrace:
    """Per-iteration record of the adaptive threshold search."""

    rows: list = field(default_factory=list)

    def append(self, prominence, step, count):
        self.rows.append((float(prominence), float(step), int(count)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "prominence", "step", "count"])
            for i, (p, s, n) in enumerate(self.rows):
                w.writerow([i, repr(p), repr(s), n])


def hann_window(n):
    """Periodic Hann window of length ``n``."""
    return np.hanning(n + 1)[:-1]


def _mono_samples(clip: AudioClip):
    if clip.channels != 1:
        raise ChannelError(f"expected a mono clip, got {clip.channels} channels")
    return np.asarray(clip.samples[:, 0], dtype=np.float64)


def energy_envelope(clip: AudioClip, frame_len=FRAME_LEN, frame_hop=FRAME_HOP) -> EnergyEnvelope:
    x = _mono_samples(clip)
    if frame_hop < 1:
        raise ConfigError("frame_hop must be at least 1")
    if len(x) < frame_len:
        raise TooShort(f"clip has {len(x)} samples, shorter than one {frame_len}-sample frame")
    n_frames = 1 + (len(x) - frame_len) // frame_hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::frame_hop][:n_frames]
    window = hann_window(frame_len)
    values = np.empty(n_frames)
    # chunked to bound memory on long recordings
    for start in range(0, n_frames, 2048):
        block = frames[start : start + 2048] * window
        values[start : start + 2048] = np.abs(np.fft.rfft(block, axis=1)).sum(axis=1)
    return EnergyEnvelope(values, frame_hop, frame_len, clip.sample_rate)


def find_peaks(env, prominence) -> list[int]:
    """Indices of local maxima with topographic prominence >= ``prominence``.

    A peak's prominence is its height minus the higher of the two minima
    found between it and the nearest higher terrain on each side (or the
    signal edge).  Flat-topped peaks report their middle sample.
    """
    values = env.values if isinstance(env, EnergyEnvelope) else np.asarray(env, dtype=float)
    if prominence < 0:
        raise ConfigError("prominence must be non-negative")
    idx, _ = _scipy_find_peaks(values, prominence=prominence)
    return [int(i) for i in idx]


def extract_segments(clip: AudioClip, peaks, env: EnergyEnvelope, labels=None, segment_len=SEGMENT_LEN) -> list[Segment]:
    """Cut ``segment_len`` samples around each peak, 25% before and 75% after."""
    x = np.asarray(clip.samples[:, 0], dtype=np.float32)
    if labels is not None and not np.isscalar(labels) and len(labels) != len(peaks):
        raise ConfigError("labels must be a single class or one per peak")
    pre = int(PRE_PEAK_FRACTION * segment_len)
    out = []
    for n, peak in enumerate(peaks):
        p = int(peak) * env.frame_hop
        start = p - pre
        seg = np.zeros(segment_len, dtype=np.float32)
        lo, hi = max(start, 0), min(start + segment_len, len(x))
        if hi > lo:
            seg[lo - start : hi - start] = x[lo:hi]
        if labels is None:
            label = None
        elif np.isscalar(labels):
            label = int(labels)
        else:
            label = int(labels[n])
        out.append(Segment(seg, p, label))
    return out


def isolate_fixed(clip: AudioClip, prominence, labels=None, frame_len=FRAME_LEN, frame_hop=FRAME_HOP) -> list[Segment]:
    env = energy_envelope(clip, frame_len, frame_hop)
    return extract_segments(clip, find_peaks(env, prominence), env, labels)


def isolate_adaptive(clip: AudioClip, params: IsolationParams, labels=None, trace=None,
                     frame_len=FRAME_LEN, frame_hop=FRAME_HOP) -> list[Segment]:
    """Adjust the prominence threshold until exactly ``target_count`` peaks remain.

    Too few peaks lowers the threshold by the current step, too many raises
    it, and the step then shrinks by ``step_decay``.  Raises
    ``ConvergenceError`` (carrying the closest segment list) after
    ``max_iterations`` passes.
    """
    env = energy_envelope(clip, frame_len, frame_hop)
    # the peak set at threshold P is exactly the local maxima with prominence >= P,
    # so prominences are computed once and each pass is a comparison
    candidates, _ = _scipy_find_peaks(env.values)
    prominences = peak_prominences(env.values, candidates)[0] if len(candidates) else np.zeros(0)
    target = params.target_count
    prom, step = float(params.initial_prominence), float(params.step)
    trace = trace if trace is not None else IsolationTrace()
    best_peaks, best_gap = None, None
    for _ in range(params.max_iterations):
        peaks = [int(i) for i in candidates[prominences >= max(prom, 0.0)]]
        trace.append(prom, step, len(peaks))
        gap = abs(len(peaks) - target)
        if best_gap is None or gap < best_gap:
            best_peaks, best_gap = peaks, gap
        if gap == 0:
            return extract_segments(clip, peaks, env, labels)
        if len(peaks) < target:
            prom -= step
        else:
            prom += step
        step *= params.step_decay
    best = extract_segments(clip, best_peaks, env)
    raise ConvergenceError(
        f"no threshold produced {target} keystrokes within {params.max_iterations} iterations "
        f"(closest: {len(best)})",
        best=best,
        trace=trace.rows,
    )
