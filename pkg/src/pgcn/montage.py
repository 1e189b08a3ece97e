"""Electrode layouts and the static spatial-proximity graph."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_RADIUS = 0.46  # radians; ~5.8 neighbours per node on the built-in layout
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Montage:
    names: tuple[str, ...]
    positions: np.ndarray  # (n, 3), unit vectors

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] != len(self.names):
            raise ValueError("positions must be an (n, 3) array matching names")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ValueError(f"duplicate electrode names: {dupes}")
        norms = np.linalg.norm(pos, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise ValueError(f"electrode {self.names[bad[0]]!r} is not on the unit sphere (|p|={norms[bad[0]]:.8f})")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    @property
    def n_channels(self) -> int:
        return len(self.names)

    def distances(self) -> np.ndarray:
        """Pairwise great-circle distances in radians."""
        cos = np.clip(self.positions @ self.positions.T, -1.0, 1.0)
        return np.arccos(cos)


def parse_montage(text: str) -> Montage:
    names, positions = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected name,x,y,z")
        names.append(parts[0])
        positions.append([float(v) for v in parts[1:]])
    if not names:
        raise ValueError("montage file lists no electrodes")
    return Montage(tuple(names), np.array(positions))


def load_montage(source: str | Path) -> Montage:
    """Read a ``name,x,y,z`` CSV montage, or ``"builtin"`` for the 62-channel layout."""
    if str(source) == "builtin":
        return builtin_montage()
    return parse_montage(Path(source).read_text(encoding="utf-8"))


def builtin_montage() -> Montage:
    text = resources.files("pgcn").joinpath("data/seed62.csv").read_text(encoding="utf-8")
    return parse_montage(text)


def ring_montage(k: int) -> Montage:
    """``k`` electrodes evenly spaced on the equator; handy for tests."""
    angles = 2 * np.pi * np.arange(k) / k
    pos = np.stack([np.cos(angles), np.sin(angles), np.zeros(k)], axis=1)
    return Montage(tuple(f"R{i}" for i in range(k)), pos)


def build_static_graph(montage: Montage, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Binary adjacency linking electrodes within ``radius`` radians, with self-loops."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    adj = (montage.distances() <= radius).astype(np.float64)
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 1.0)
    isolated = np.flatnonzero(adj.sum(axis=1) == 1)
    if isolated.size:
        warnings.warn(
            f"{isolated.size} electrode(s) have no neighbour within radius {radius}",
            stacklevel=2,
        )
    return adj


def normalize_graph(adj: np.ndarray, mode: str = "sym") -> np.ndarray:
    """``D^-1/2 A D^-1/2`` (``"sym"``), ``D^-1 A`` (``"row"``) or ``A`` unchanged (``"none"``)."""
    adj = np.asarray(adj, dtype=np.float64)
    if mode == "none":
        return adj
    deg = adj.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("graph has a node with no edges")
    if mode == "row":
        return adj / deg[:, None]
    if mode == "sym":
        s = 1.0 / np.sqrt(deg)
        return adj * s[:, None] * s[None, :]
    raise ValueError(f"unknown normalisation {mode!r}")
