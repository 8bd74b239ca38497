"""RIFF/WAVE reading and writing for 16-bit PCM and 32-bit IEEE float."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyAudio, IoError, ParseError, UnsupportedFormat

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Waveform as a (frames, channels) float array plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"samples must be (frames, channels), got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self):
        return self.samples.shape[1]

    @property
    def n_frames(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return self.n_frames / self.sample_rate

    @property
    def mono(self):
        """1-D view of a single-channel clip."""
        if self.channels != 1:
            raise ValueError("clip has more than one channel")
        return self.samples[:, 0]


def _chunks(raw):
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"chunk {cid!r} truncated: declared {size} bytes, found {len(body)}")
        yield cid, body
        pos += 8 + size + (size & 1)


def parse_wav(raw: bytes) -> AudioClip:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE file")
    fmt = data = None
    for cid, body in _chunks(raw):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
            break
    if fmt is None or len(fmt) < 16:
        raise ParseError("missing or short fmt chunk")
    if data is None:
        raise ParseError("missing data chunk")
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack_from("<H", fmt, 24)
    if channels < 1 or rate == 0:
        raise ParseError(f"invalid header: channels={channels}, rate={rate}")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), None
    else:
        raise UnsupportedFormat(f"format tag {tag} with {bits}-bit samples is not supported")
    if block_align != channels * dtype.itemsize:
        raise ParseError(f"block align {block_align} inconsistent with {channels}x{bits}-bit frames")
    n_frames = len(data) // block_align
    if n_frames == 0:
        raise EmptyAudio("data chunk holds no samples")
    samples = np.frombuffer(data[: n_frames * block_align], dtype=dtype).reshape(n_frames, channels)
    if scale is None:
        samples = samples.astype(np.float32)
    else:
        samples = samples.astype(np.float32) * np.float32(scale)
    return AudioClip(samples, rate)


def load_wav(path) -> AudioClip:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_wav(raw)


def encode_wav(clip: AudioClip) -> bytes:
    """Serialize as IEEE float-32, frames interleaved."""
    payload = np.ascontiguousarray(clip.samples, dtype="<f4").tobytes()
    ch = clip.channels
    fmt = struct.pack("<HHIIHH", WAVE_FORMAT_IEEE_FLOAT, ch, clip.sample_rate, clip.sample_rate * ch * 4, ch * 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def save_wav(clip: AudioClip, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_wav(clip))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def to_mono(clip: AudioClip) -> AudioClip:
    """Average channels; a mono clip is returned unchanged."""
    if clip.channels == 1:
        return clip
    return AudioClip(clip.samples.mean(axis=1, dtype=np.float64).astype(clip.samples.dtype), clip.sample_rate)
