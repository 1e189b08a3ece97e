"""Labelled feature datasets, fine-to-coarse label schemes and synthetic data."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .container import FormatError, read_container, write_container
from .features import DEFAULT_BANDS, RawRecording, band_filter

DATASET_MAGIC = b"PGCNDS01"
DATASET_VERSION = 1

COARSE_CLASSES = ("negative", "neutral", "positive")

# fine class names in label order -> coarse class name
SCHEMES: dict[str, dict[str, str]] = {
    "seed4-like": {"neutral": "neutral", "sad": "negative", "fear": "negative", "happy": "positive"},
    "mped-like": {
        "joy": "positive",
        "funny": "positive",
        "anger": "negative",
        "fear": "negative",
        "disgust": "negative",
        "sadness": "negative",
        "neutral": "neutral",
    },
}


def fine_classes(scheme: str) -> tuple[str, ...]:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown label scheme {scheme!r}")
    return tuple(SCHEMES[scheme])


def coarse_map(label: int | str, scheme: str = "seed4-like", table: Mapping[int, int] | None = None) -> int:
    """Coarse class index for a fine label (index or class name).

    Coarse indices follow ``COARSE_CLASSES`` for the built-in schemes; ``custom``
    uses ``table`` as given.
    """
    if scheme == "custom":
        if table is None or label not in table:
            raise ValueError(f"label {label!r} missing from custom table")
        return int(table[label])
    names = fine_classes(scheme)
    if isinstance(label, str):
        if label not in SCHEMES[scheme]:
            raise ValueError(f"unknown {scheme} label {label!r}")
        name = label
    else:
        if not 0 <= int(label) < len(names):
            raise ValueError(f"label {label} out of range for {scheme}")
        name = names[int(label)]
    return COARSE_CLASSES.index(SCHEMES[scheme][name])


def coarse_table(scheme: str, n_fine: int | None = None) -> dict[int, int]:
    names = fine_classes(scheme)
    if n_fine is not None and n_fine != len(names):
        raise ValueError(f"{scheme} has {len(names)} fine classes, not {n_fine}")
    return {i: coarse_map(i, scheme) for i in range(len(names))}


@dataclass
class LabeledDataset:
    features: np.ndarray  # (samples, channels, bands)
    fine: np.ndarray
    coarse: np.ndarray
    subject: np.ndarray
    session: np.ndarray
    trial: np.ndarray
    scheme: str = "seed4-like"
    feature_kind: str = "synthetic"
    band_edges: tuple[tuple[float, float], ...] = DEFAULT_BANDS
    channel_names: tuple[str, ...] = ()
    table: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("features must be (samples, channels, bands)")
        for name in ("fine", "coarse", "subject", "session", "trial"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if arr.shape[0] != self.features.shape[0]:
                raise ValueError(f"{name} has {arr.shape[0]} entries for {self.features.shape[0]} samples")
            setattr(self, name, arr)
        if not self.table:
            self.table = coarse_table(self.scheme) if self.scheme != "custom" else {}
        self.table = {int(k): int(v) for k, v in self.table.items()}
        expected = np.array([self.table.get(int(f), -1) for f in self.fine], dtype=np.int64)
        if len(self) and not np.array_equal(expected, self.coarse):
            raise ValueError("coarse labels disagree with the label scheme")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    @property
    def n_bands(self) -> int:
        return self.features.shape[2]

    @property
    def n_fine(self) -> int:
        return len(self.table)

    @property
    def n_coarse(self) -> int:
        return max(self.table.values()) + 1

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return LabeledDataset(
            self.features[index], self.fine[index], self.coarse[index], self.subject[index],
            self.session[index], self.trial[index], self.scheme, self.feature_kind,
            self.band_edges, self.channel_names, dict(self.table),
        )

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("fine", "coarse", "subject", "session", "trial"))
            and (self.scheme, self.feature_kind, tuple(map(tuple, self.band_edges)), tuple(self.channel_names), self.table)
            == (other.scheme, other.feature_kind, tuple(map(tuple, other.band_edges)), tuple(other.channel_names), other.table)
        )


def from_feature_matrices(
    items: Sequence[tuple[np.ndarray, int, int, int, int]],
    scheme: str,
    feature_kind: str,
    band_edges=DEFAULT_BANDS,
    channel_names: Sequence[str] = (),
    table: Mapping[int, int] | None = None,
) -> LabeledDataset:
    """Build a dataset from ``(matrix, fine, subject, session, trial)`` tuples."""
    table = dict(table) if table else coarse_table(scheme)
    if not items:
        n, d = len(channel_names), len(band_edges)
        return LabeledDataset(np.zeros((0, n, d)), [], [], [], [], [], scheme, feature_kind,
                              tuple(band_edges), tuple(channel_names), table)
    features = np.stack([it[0] for it in items])
    fine = np.array([it[1] for it in items])
    coarse = np.array([coarse_map(int(f), scheme, table) for f in fine])
    cols = np.array([it[2:] for it in items]).reshape(len(items), 3)
    return LabeledDataset(features, fine, coarse, cols[:, 0], cols[:, 1], cols[:, 2], scheme,
                          feature_kind, tuple(band_edges), tuple(channel_names), table)


@dataclass(frozen=True)
class SynthConfig:
    subjects: int = 10
    trials: int = 8
    segments: int = 30
    n_fine: int = 7
    scheme: str = "mped-like"
    separation: float = 0.5
    subject_strength: float = 1.0
    noise: float = 1.0
    sibling_share: float = 0.6  # squared cosine weight of the shared coarse component
    n_channels: int = 62
    n_bands: int = 5
    sessions: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.subjects, self.trials, self.segments, self.sessions, self.n_channels, self.n_bands) < 1:
            raise ValueError("all counts must be >= 1")
        if min(self.separation, self.subject_strength, self.noise) < 0:
            raise ValueError("strengths must be non-negative")
        if not 0 <= self.sibling_share < 1:
            raise ValueError("sibling_share must lie in [0, 1)")


def class_templates(config: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit-RMS (n_fine, channels, bands) templates; siblings share a coarse component.

    Built from an orthonormal basis, so two fine classes with the same coarse
    class have cosine similarity exactly ``sibling_share`` and all other pairs
    are orthogonal.
    """
    rng = rng or np.random.default_rng(config.seed)
    table = coarse_table(config.scheme, config.n_fine)
    dim = config.n_channels * config.n_bands
    n_coarse = len(COARSE_CLASSES)
    if dim < n_coarse + config.n_fine:
        raise ValueError("channels x bands too small for orthogonal templates")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n_coarse + config.n_fine)))
    a, b = np.sqrt(config.sibling_share), np.sqrt(1 - config.sibling_share)
    temps = [a * basis[:, table[k]] + b * basis[:, n_coarse + k] for k in range(config.n_fine)]
    return np.sqrt(dim) * np.stack(temps).reshape(config.n_fine, config.n_channels, config.n_bands)


def trial_label(subject: int, trial: int, n_fine: int) -> int:
    """Trials cycle through the classes, starting at an offset per subject."""
    return (trial + subject) % n_fine


def _band_edges(n_bands: int) -> tuple[tuple[float, float], ...]:
    if n_bands <= len(DEFAULT_BANDS):
        return DEFAULT_BANDS[:n_bands]
    return tuple((float(i), float(i + 1)) for i in range(n_bands))


def synth_generate(config: SynthConfig, channel_names: Sequence[str] = ()) -> LabeledDataset:
    """Synthetic feature dataset: template * separation + subject offset + noise."""
    rng = np.random.default_rng(config.seed)
    templates = class_templates(config, rng)
    table = coarse_table(config.scheme, config.n_fine)
    shape = (config.n_channels, config.n_bands)
    features, fine, subj, sess, trial = [], [], [], [], []
    for s in range(config.subjects):
        offset = rng.standard_normal(shape)
        for sn in range(config.sessions):
            for t in range(config.trials):
                k = trial_label(s, t, config.n_fine)
                base = config.separation * templates[k] + config.subject_strength * offset
                noise = rng.standard_normal((config.segments,) + shape)
                features.append(base + config.noise * noise)
                fine += [k] * config.segments
                subj += [s] * config.segments
                sess += [sn] * config.segments
                trial += [t] * config.segments
    features = np.concatenate(features) if features else np.zeros((0,) + shape)
    fine = np.array(fine, dtype=np.int64)
    coarse = np.array([table[int(f)] for f in fine], dtype=np.int64)
    return LabeledDataset(features, fine, coarse, subj, sess, trial, config.scheme, "synthetic",
                          _band_edges(config.n_bands),
                          tuple(channel_names), table)


def synth_recording(
    band_power: np.ndarray,
    fs: float = 200.0,
    seconds: float = 1.0,
    bands=DEFAULT_BANDS,
    rng: np.random.Generator | None = None,
    **ids,
) -> RawRecording:
    """Band-limited noise whose per-band mean square is ``band_power`` (n, d).

    Each band gets its own white-noise draw, FFT-masked to the band and scaled to
    the requested power. Overlapping band edges add their shared bins twice.
    """
    rng = rng or np.random.default_rng(0)
    band_power = np.asarray(band_power, dtype=np.float64)
    n = band_power.shape[0]
    n_samples = int(round(fs * seconds))
    out = np.zeros((n, n_samples))
    for b, band in enumerate(bands):
        comp = band_filter(rng.standard_normal((n, n_samples)), fs, band)
        comp /= np.sqrt(np.mean(comp**2, axis=1, keepdims=True))
        out += np.sqrt(band_power[:, b : b + 1]) * comp
    return RawRecording(out, fs, **ids)


def save_dataset(path: str | Path, ds: LabeledDataset) -> None:
    header = {
        "format": "pgcn-dataset",
        "version": DATASET_VERSION,
        "scheme": ds.scheme,
        "feature_kind": ds.feature_kind,
        "band_edges": [list(b) for b in ds.band_edges],
        "channel_names": list(ds.channel_names),
        "table": {str(k): v for k, v in ds.table.items()},
        "n_channels": ds.n_channels,
        "n_bands": ds.n_bands,
        "count": len(ds),
    }
    arrays = {"features": ds.features}
    for name in ("fine", "coarse", "subject", "session", "trial"):
        arrays[name] = getattr(ds, name).astype(np.float64)
    write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path: str | Path) -> LabeledDataset:
    header, arrays = read_container(path, DATASET_MAGIC)
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {header.get('version')}")
    missing = {"features", "fine", "coarse", "subject", "session", "trial"} - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing arrays {sorted(missing)}")
    if arrays["features"].shape[0] != header["count"]:
        raise FormatError(f"{path}: sample count does not match header")
    ints = {k: arrays[k].astype(np.int64) for k in ("fine", "coarse", "subject", "session", "trial")}
    return LabeledDataset(
        arrays["features"].reshape(header["count"], header["n_channels"], header["n_bands"]),
        scheme=header["scheme"],
        feature_kind=header["feature_kind"],
        band_edges=tuple(tuple(b) for b in header["band_edges"]),
        channel_names=tuple(header["channel_names"]),
        table={int(k): int(v) for k, v in header["table"].items()},
        **ints,
    )
