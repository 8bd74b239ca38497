import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keystroke_asca.errors import ConfigError, LabelError, ResolutionError, SampleRateError, ShapeError
from keystroke_asca.features import (
    AugmentConfig, MelConfig, Spectrogram, build_dataset, draw_masks, hz_to_mel, log_mel, mel_filterbank,
    mel_spectrogram, normalize, read_store, save_png, spec_mask, time_shift, write_store,
)
from keystroke_asca.isolation import SEGMENT_LEN, Segment


def oracle_log_mel(x, n_mels=64, n_fft=1024, hop=225, rate=44100, floor=1e-10):
    """Loop-level reference: manual reflect pad, naive DFT, per-bin triangle weights, dB."""
    pad = n_fft // 2
    n = len(x)
    xp = [x[pad - i] for i in range(pad)] + list(x) + [x[n - 2 - i] for i in range(pad)]
    xp = np.array(xp, dtype=np.float64)
    t = np.arange(n_fft)
    window = 0.5 * (1 - np.cos(2 * math.pi * t / n_fft))
    n_bins = n_fft // 2 + 1
    basis = np.exp(-2j * math.pi * np.outer(np.arange(n_bins), t) / n_fft)
    mel = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)  # noqa: E731
    top = mel(rate / 2)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    bin_freq = [rate / 2 * b / (n_bins - 1) for b in range(n_bins)]
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for b, f in enumerate(bin_freq):
            if lo < f <= c:
                weights[m, b] = (f - lo) / (c - lo)
            elif c < f < hi:
                weights[m, b] = (hi - f) / (hi - c)
    cols = []
    for start in range(0, len(xp) - n_fft + 1, hop):
        power = np.abs(basis @ (xp[start : start + n_fft] * window)) ** 2
        cols.append([10 * math.log10(max(v, floor)) for v in weights @ power])
    return np.array(cols).T


def test_mel_scale_anchor():
    assert abs(float(hz_to_mel(1000.0)) - 1000.0) <= 0.5
    assert float(hz_to_mel(0.0)) == 0.0


def test_filterbank_shape_and_rows():
    fb = mel_filterbank(MelConfig(), 44100)
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0)
    peaks = np.argmax(fb, axis=1)
    assert np.all(np.diff(peaks) >= 0) and peaks[-1] > peaks[0]
    for row in fb:
        nz = np.flatnonzero(row)
        support = row[nz[0] : nz[-1] + 1]
        assert np.all(support > 0)  # zero outside one contiguous triangle
        top = int(np.argmax(support))
        assert np.all(np.diff(support[: top + 1]) >= 0) and np.all(np.diff(support[top:]) <= 0)


def test_filterbank_resolution_error():
    with pytest.raises(ResolutionError):
        mel_filterbank(MelConfig(n_mels=200, n_fft=256), 44100)


def test_log_mel_matches_bruteforce_oracle():
    x = np.random.default_rng(11).standard_normal(2048)
    got = log_mel(x, MelConfig(), 44100, n_frames=1 + 2048 // 225)
    ref = oracle_log_mel(x)
    assert got.shape == ref.shape == (64, 10)
    assert np.max(np.abs(got - ref)) <= 1e-4


def test_segment_gives_64_frames_and_floor():
    spec = mel_spectrogram(Segment(np.zeros(SEGMENT_LEN), 0, 3))
    assert spec.values.shape == (64, 64) and spec.label == 3
    assert np.all(spec.values == pytest.approx(-100.0))
    samples = (np.random.default_rng(0).standard_normal(SEGMENT_LEN) * 0.1).astype(np.float32)
    rnd = mel_spectrogram(Segment(samples, 0))
    assert np.all(np.isfinite(rnd.values))
    # the 64 kept frames are the first 64 of the 65 centred frames
    full = log_mel(samples, MelConfig(), 44100, n_frames=65)
    np.testing.assert_allclose(rnd.values, full[:, :64], rtol=0, atol=1e-9)


def test_mel_spectrogram_errors():
    with pytest.raises(ShapeError):
        mel_spectrogram(Segment(np.zeros(1000), 0))
    with pytest.raises(SampleRateError):
        mel_spectrogram(Segment(np.zeros(SEGMENT_LEN), 0), sample_rate=48000)


def test_config_validation():
    with pytest.raises(ConfigError):
        MelConfig(n_fft=1000)
    with pytest.raises(ConfigError):
        MelConfig(hop=0)
    with pytest.raises(ConfigError):
        MelConfig(f_min=5000, f_max=1000)
    with pytest.raises(ConfigError):
        AugmentConfig(max_shift_fraction=1.0)
    with pytest.raises(ConfigError):
        AugmentConfig(masks_per_axis=-1)


# -- time shift -----------------------------------------------------------------

def test_time_shift_forced_and_identity():
    seg = Segment(np.arange(1, 11, dtype=np.float32), 0, 4)
    out = time_shift(seg, np.random.default_rng(0), shift=3)
    np.testing.assert_array_equal(out.samples, [0, 0, 0, 1, 2, 3, 4, 5, 6, 7])
    assert out.label == 4
    back = time_shift(seg, np.random.default_rng(0), shift=-2)
    np.testing.assert_array_equal(back.samples, [3, 4, 5, 6, 7, 8, 9, 10, 0, 0])
    assert np.all(time_shift(seg, None, shift=10).samples == 0)
    same = time_shift(seg, np.random.default_rng(0), max_fraction=0.0)
    np.testing.assert_array_equal(same.samples, seg.samples)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_time_shift_bound(seed):
    x = np.zeros(SEGMENT_LEN, dtype=np.float32)
    x[7200] = 1.0
    out = time_shift(Segment(x, 0, 1), np.random.default_rng(seed), 0.4)
    assert out.samples.shape == (SEGMENT_LEN,) and out.label == 1
    k = int(np.flatnonzero(out.samples)[0]) - 7200
    assert abs(k) <= 5760


# -- masking ----------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masks_fill_with_premask_mean(seed):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((64, 64))
    mu = values.mean()
    bands = draw_masks(np.random.default_rng(seed + 1), values.shape, AugmentConfig())
    out = spec_mask(Spectrogram(values, 2), np.random.default_rng(seed + 1)).values
    assert out.shape == (64, 64)
    assert len(bands) == 4
    assert [b[0] for b in bands] == [1, 1, 0, 0]
    for axis, start, w in bands:
        assert 0 <= w <= 6 and start + w <= 64
        region = out[:, start : start + w] if axis == 1 else out[start : start + w, :]
        assert np.all(region == mu)
    cols = {c for axis, start, w in bands if axis == 1 for c in range(start, start + w)}
    rows = {r for axis, start, w in bands if axis == 0 for r in range(start, start + w)}
    assert len(cols) <= 12 and len(rows) <= 12
    allowed = np.zeros((64, 64), dtype=bool)
    allowed[:, sorted(cols)] = True
    allowed[sorted(rows), :] = True
    assert not np.any((out != values) & ~allowed)


def test_mask_fraction_zero_is_identity():
    values = np.random.default_rng(0).standard_normal((64, 64))
    out = spec_mask(Spectrogram(values, 1), np.random.default_rng(0), AugmentConfig(mask_fraction=0.0))
    np.testing.assert_array_equal(out.values, values)
    assert out.label == 1


# -- normalisation ----------------------------------------------------------------

def test_normalize():
    assert np.all(normalize(Spectrogram(np.full((64, 64), 3.5))).values == 0)
    v = np.random.default_rng(2).standard_normal((64, 64)) * 7 + 4
    out = normalize(Spectrogram(v)).values
    assert abs(out.mean()) <= 1e-6 and abs(out.std() - 1) <= 1e-6
    np.testing.assert_allclose(normalize(Spectrogram(out)).values, out, atol=1e-12)


# -- dataset --------------------------------------------------------------------

def _segments(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Segment(rng.standard_normal(SEGMENT_LEN) * 0.05, 0, i % 36) for i in range(n)]


def test_build_dataset_augment_off_is_rng_independent():
    segs = _segments(6)
    a = build_dataset(segs, rng=1)
    b = build_dataset(segs, rng=99)
    assert [s.label for s in a] == [s.label for s in segs]
    for x, y in zip(a, b):
        assert x.values.shape == (64, 64)
        np.testing.assert_array_equal(x.values, y.values)


def test_build_dataset_seeded_augmentation():
    segs = _segments(5)
    a = build_dataset(segs, rng=7, augment=True)
    b = build_dataset(segs, rng=7, augment=True)
    c = build_dataset(segs, rng=8, augment=True)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, c))
    plain = build_dataset(segs)
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, plain))
    # one item's augmentation is unaffected by the rest of the batch
    alone = build_dataset(segs[:2], rng=7, augment=True)
    np.testing.assert_array_equal(alone[1].values, a[1].values)


def test_build_dataset_900_items():
    out = build_dataset(_segments(900))
    assert len(out) == 900
    assert [s.label for s in out] == [i % 36 for i in range(900)]
    assert all(np.all(np.isfinite(s.values)) for s in out[::100])


def test_build_dataset_requires_labels():
    with pytest.raises(LabelError):
        build_dataset([Segment(np.zeros(SEGMENT_LEN), 0)])
    assert build_dataset([]) == []


# -- exports ----------------------------------------------------------------------

def test_store_roundtrip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 64, 64)).astype(np.float32)
    write_store(tmp_path / "specs", arr, labels=[1, 2, 3], seed=5)
    raw = (tmp_path / "specs.f32").read_bytes()
    assert len(raw) == arr.size * 4 and raw == arr.astype("<f4").tobytes()
    back, side = read_store(tmp_path / "specs.json")
    np.testing.assert_array_equal(back, arr)
    assert side["shape"] == [3, 64, 64] and side["labels"] == [1, 2, 3] and side["seed"] == 5
    (tmp_path / "specs.f32").write_bytes(raw[:-4])
    with pytest.raises(ShapeError):
        read_store(tmp_path / "specs")


def test_png_export(tmp_path):
    from PIL import Image

    v = np.zeros((64, 64))
    v[0, :] = 1.0  # lowest band
    save_png(v, tmp_path / "s.png")
    img = np.array(Image.open(tmp_path / "s.png"))
    assert img.shape == (64, 64) and img.dtype == np.uint8
    assert np.all(img[-1] == 255) and np.all(img[0] == 0)
