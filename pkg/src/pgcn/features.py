"""Band features from raw multichannel recordings.

Band-pass filtering is an FFT mask: bins with ``lo <= f < hi`` are kept, all
others zeroed, then transformed back. It is zero-phase and exact for tones that
sit on a frequency bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import FormatError, read_container, write_container

BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma")
DEFAULT_BANDS: tuple[tuple[float, float], ...] = ((1, 5), (4, 8), (8, 14), (14, 30), (30, 50))
FEATURE_KINDS = ("band_energy", "differential_entropy", "stft_power")
_KIND_ALIASES = {"energy": "band_energy", "de": "differential_entropy", "stft": "stft_power"}

RECORDING_MAGIC = b"PGCNRAW1"


class DegenerateSegmentError(ValueError):
    """Segment has zero variance, so differential entropy is undefined."""


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray  # (channels, samples)
    fs: float
    subject: int = 0
    session: int = 0
    trial: int = 0
    channel_names: tuple[str, ...] = ()
    label: int | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("samples must be channels x time")
        object.__setattr__(self, "samples", x)
        if self.channel_names and len(self.channel_names) != x.shape[0]:
            raise ValueError("channel_names length differs from channel count")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # (n, d)
    feature_kind: str
    band_edges: tuple[tuple[float, float], ...] = field(default=DEFAULT_BANDS)


def normalize_kind(kind: str) -> str:
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")
    return kind


def parse_bands(text: str) -> tuple[tuple[float, float], ...]:
    """Parse ``"1-5,4-8,..."`` into band edge pairs."""
    bands = []
    for item in text.split(","):
        lo, _, hi = item.strip().partition("-")
        bands.append((float(lo), float(hi)))
    return tuple(bands)


def segment(rec: RawRecording, window_s: float = 1.0) -> list[RawRecording]:
    """Non-overlapping windows; the trailing remainder is dropped."""
    width = int(round(window_s * rec.fs))
    if width < 8:
        raise ValueError(f"window of {width} samples is too short")
    total = rec.samples.shape[1]
    if total == 0:
        raise ValueError("empty recording")
    return [replace(rec, samples=rec.samples[:, s : s + width]) for s in range(0, total - width + 1, width)]


def _check_band(band, fs: float) -> tuple[float, float]:
    lo, hi = float(band[0]), float(band[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid band {band}")
    if hi > fs / 2:
        raise ValueError(f"band {band} exceeds the Nyquist frequency {fs / 2}")
    return lo, hi


def band_filter(x: np.ndarray, fs: float, band) -> np.ndarray:
    lo, hi = _check_band(band, fs)
    x = np.asarray(x, dtype=np.float64)
    spectrum = np.fft.rfft(x, axis=-1)
    freqs = np.fft.rfftfreq(x.shape[-1], d=1.0 / fs)
    spectrum[..., (freqs < lo) | (freqs >= hi)] = 0.0
    return np.fft.irfft(spectrum, n=x.shape[-1], axis=-1)


def band_energy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("empty segment")
    return np.mean(x**2, axis=-1)


def de_feature(x: np.ndarray) -> np.ndarray:
    """Gaussian differential entropy ``0.5 ln(2 pi e var)`` per channel."""
    var = np.var(np.asarray(x, dtype=np.float64), axis=-1, ddof=1)
    if np.any(var <= 0):
        raise DegenerateSegmentError("zero-variance channel in segment")
    return 0.5 * np.log(2 * math.pi * math.e * var)


def stft_band_power(x: np.ndarray, fs: float, band) -> np.ndarray:
    """Mean over Hann-windowed frames (fs/4 long, 50% overlap) of in-band power."""
    lo, hi = _check_band(band, fs)
    x = np.asarray(x, dtype=np.float64)
    frame = int(round(fs / 4))
    if frame > x.shape[-1]:
        raise ValueError(f"frame of {frame} samples is longer than the segment")
    hop = frame // 2
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame) / frame)  # periodic Hann
    frames = np.lib.stride_tricks.sliding_window_view(x, frame, axis=-1)[..., ::hop, :]
    power = np.abs(np.fft.rfft(frames * win, axis=-1)) ** 2 / np.sum(win**2)
    freqs = np.fft.rfftfreq(frame, d=1.0 / fs)
    keep = (freqs >= lo) & (freqs < hi)
    return power[..., keep].sum(axis=-1).mean(axis=-1)


def featurize_segment(x: np.ndarray, fs: float, kind: str, bands=DEFAULT_BANDS) -> np.ndarray:
    kind = normalize_kind(kind)
    cols = []
    for band in bands:
        if kind == "stft_power":
            cols.append(stft_band_power(x, fs, band))
        else:
            filtered = band_filter(x, fs, band)
            cols.append(band_energy(filtered) if kind == "band_energy" else de_feature(filtered))
    return np.stack(cols, axis=1)


def featurize(
    rec: RawRecording,
    kind: str = "differential_entropy",
    bands: Sequence[tuple[float, float]] = DEFAULT_BANDS,
    window_s: float = 1.0,
) -> list[FeatureMatrix]:
    """One ``n x len(bands)`` feature matrix per 1-s segment."""
    kind = normalize_kind(kind)
    bands = tuple((float(lo), float(hi)) for lo, hi in bands)
    return [
        FeatureMatrix(featurize_segment(seg.samples, rec.fs, kind, bands), kind, bands)
        for seg in segment(rec, window_s)
    ]


def save_recording(path: str | Path, rec: RawRecording) -> None:
    header = {
        "format": "pgcn-recording",
        "version": 1,
        "fs": rec.fs,
        "n_channels": rec.n_channels,
        "subject": rec.subject,
        "session": rec.session,
        "trial": rec.trial,
        "label": rec.label,
        "channel_names": list(rec.channel_names),
    }
    write_container(path, RECORDING_MAGIC, header, {"samples": rec.samples})


def load_recording(path: str | Path) -> RawRecording:
    header, arrays = read_container(path, RECORDING_MAGIC)
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported recording version {header.get('version')}")
    samples = arrays.get("samples")
    if samples is None or samples.shape[0] != header["n_channels"]:
        raise FormatError(f"{path}: sample block does not match header")
    return RawRecording(
        samples=samples,
        fs=float(header["fs"]),
        subject=int(header["subject"]),
        session=int(header["session"]),
        trial=int(header["trial"]),
        channel_names=tuple(header.get("channel_names", ())),
        label=header.get("label"),
    )
