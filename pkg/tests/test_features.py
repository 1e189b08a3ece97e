import math

import numpy as np
import pytest

from pgcn.datasets import synth_recording
from pgcn.features import (
    DEFAULT_BANDS,
    DegenerateSegmentError,
    RawRecording,
    band_energy,
    band_filter,
    de_feature,
    featurize,
    load_recording,
    parse_bands,
    save_recording,
    segment,
    stft_band_power,
)

FS = 200.0


def tone(freq, seconds=1.0, fs=FS, amp=1.0, n=1):
    t = np.arange(int(seconds * fs)) / fs
    return np.tile(amp * np.sin(2 * np.pi * freq * t), (n, 1))


def rms(x):
    return float(np.sqrt(np.mean(x**2)))


def test_segment_counts_and_ids():
    rec = RawRecording(np.zeros((2, int(3.5 * FS))), FS, subject=4, session=2, trial=9, label=1)
    segs = segment(rec, 1.0)
    assert len(segs) == 3
    assert all(s.samples.shape == (2, 200) for s in segs)
    assert all((s.subject, s.session, s.trial, s.label) == (4, 2, 9, 1) for s in segs)
    assert len(segment(RawRecording(np.zeros((1, 600)), FS), 1.0)) == 3


def test_segment_rejects_empty_and_tiny_windows():
    with pytest.raises(ValueError):
        segment(RawRecording(np.zeros((1, 0)), FS))
    with pytest.raises(ValueError):
        segment(RawRecording(np.zeros((1, 100)), FS), window_s=0.01)


def test_in_band_sine_passes_unchanged():
    x = tone(10)
    assert rms(band_filter(x, FS, (8, 14)) - x) < 1e-9


def test_out_of_band_sine_is_removed():
    assert rms(band_filter(tone(10), FS, (30, 50))) < 1e-9


def test_zero_signal_stays_zero():
    assert np.array_equal(band_filter(np.zeros((2, 200)), FS, (4, 8)), np.zeros((2, 200)))


def test_band_above_nyquist_rejected():
    with pytest.raises(ValueError, match="Nyquist"):
        band_filter(tone(10), FS, (30, 120))


def test_band_energy_of_unit_sine():
    assert band_energy(band_filter(tone(10), FS, (8, 14)))[0] == pytest.approx(0.5, abs=1e-6)
    assert band_energy(np.zeros((1, 10)))[0] == 0.0


def test_band_energy_homogeneous():
    x = np.random.default_rng(0).normal(size=(3, 200))
    assert np.allclose(band_energy(3.0 * x), 9.0 * band_energy(x))


def test_de_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4000))
    x = (x - x.mean()) / x.std(ddof=1)
    assert de_feature(x)[0] == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert de_feature(math.e * x)[0] == pytest.approx(de_feature(x)[0] + 1.0, abs=1e-12)


def test_de_zero_variance_errors():
    with pytest.raises(DegenerateSegmentError):
        de_feature(np.ones((1, 50)))


def test_de_shift_invariant():
    x = np.random.default_rng(2).normal(size=(2, 300))
    assert np.allclose(de_feature(x + 7.5), de_feature(x), atol=1e-12)


def test_stft_in_band_tone():
    p = {b: stft_band_power(tone(40), FS, b)[0] for b in DEFAULT_BANDS}
    assert p[(30, 50)] > 1.0
    for band, value in p.items():
        if band != (30, 50):
            assert value < 1e-20


def test_stft_zero_signal():
    assert stft_band_power(np.zeros((1, 200)), FS, (8, 14))[0] == 0.0


def test_stft_power_additive_over_disjoint_tones():
    a, b = tone(12), tone(40)
    for band in [(8, 14), (14, 30), (30, 50)]:
        mix = stft_band_power(a + b, FS, band)[0]
        parts = stft_band_power(a, FS, band)[0] + stft_band_power(b, FS, band)[0]
        assert mix == pytest.approx(parts, rel=0.05)


def test_stft_frame_longer_than_segment():
    with pytest.raises(ValueError):
        stft_band_power(np.zeros((1, 40)), FS, (8, 14))


def test_featurize_62_channels_shape():
    rng = np.random.default_rng(3)
    rec = RawRecording(rng.normal(size=(62, 3 * int(FS))), FS)
    for kind in ("de", "energy", "stft"):
        mats = featurize(rec, kind)
        assert len(mats) == 3
        assert all(m.values.shape == (62, 5) for m in mats)


@pytest.mark.parametrize("fs,seconds", [(128.0, 2.0), (200.0, 1.0), (1000.0, 1.5)])
def test_featurize_shape_independent_of_fs(fs, seconds):
    rec = RawRecording(np.random.default_rng(4).normal(size=(3, int(fs * seconds))), fs)
    assert all(m.values.shape == (3, 5) for m in featurize(rec, "energy"))


SINGLE_BAND_CASES = [(k, b) for k in ("energy", "de", "stft") for b in range(5)
                     if not (k == "stft" and b == 1)]  # 4 Hz STFT bins: delta and theta share one bin


@pytest.mark.parametrize("kind,band_index", SINGLE_BAND_CASES)
def test_single_band_tone_dominates_its_column(kind, band_index):
    # pick a tone that only one band's half-open mask contains (1-s bins)
    freq = {0: 2, 1: 6, 2: 11, 3: 20, 4: 40}[band_index]
    x = tone(freq, n=2) + 1e-3 * np.random.default_rng(5).normal(size=(2, 200))
    mats = featurize(RawRecording(x, FS), kind)
    assert np.argmax(mats[0].values[0]) == band_index


def test_featurize_deterministic():
    rec = RawRecording(np.random.default_rng(6).normal(size=(4, 400)), FS)
    a = featurize(rec, "de")
    b = featurize(rec, "de")
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))


def test_band_partition_of_white_noise():
    # half-open masks make adjacent bands disjoint; delta/theta still overlap on 4-5 Hz
    x = np.random.default_rng(7).normal(size=(4, 20 * int(FS)))
    total = band_energy(band_filter(x, FS, (1, 50)))
    no_overlap = ((1, 4), (4, 8), (8, 14), (14, 30), (30, 50))
    parts = sum(band_energy(band_filter(x, FS, b)) for b in no_overlap)
    assert np.allclose(parts, total, rtol=0.02)
    default_parts = sum(band_energy(band_filter(x, FS, b)) for b in DEFAULT_BANDS)
    overlap = band_energy(band_filter(x, FS, (4, 5)))
    assert np.allclose(default_parts, total + overlap, rtol=0.02)


def test_parse_bands():
    assert parse_bands("1-4, 4-8") == ((1.0, 4.0), (4.0, 8.0))


def test_recording_round_trip(tmp_path):
    rec = synth_recording(np.ones((3, 5)), fs=FS, seconds=2, subject=2, session=1, trial=5,
                          channel_names=("A", "B", "C"), label=3)
    save_recording(tmp_path / "r.bin", rec)
    back = load_recording(tmp_path / "r.bin")
    assert back.samples.tobytes() == rec.samples.tobytes()
    assert (back.fs, back.subject, back.session, back.trial, back.label) == (FS, 2, 1, 5, 3)
    assert back.channel_names == ("A", "B", "C")


def test_synth_recording_band_power():
    power = np.array([[1.0, 0.0, 0.0, 0.0, 4.0], [0.0, 0.0, 2.0, 0.0, 0.0]])
    rec = synth_recording(power, fs=FS, seconds=4, rng=np.random.default_rng(8))
    got = np.stack([band_energy(band_filter(rec.samples, FS, b)) for b in ((1, 4), (8, 14), (30, 50))], axis=1)
    assert got[1, 1] == pytest.approx(2.0, rel=1e-9)
    assert got[0, 2] == pytest.approx(4.0, rel=1e-9)
    assert got[1, 2] == pytest.approx(0.0, abs=1e-12)
