"""Dual-head progressive graph convolution network.

Each head owns a dynamic-graph generator, one graph filter per band on its
dynamic graph, a filter on the shared static graph and a linear classifier.
The coarse head sees only its own features. The fine head classifies
``[fine_features, stop_gradient(coarse_features)]``, so neither head's loss reaches the other head's
parameters.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import numkit as nk
from .chebconv import DEFAULT_ORDER, band_filters, cheb_conv
from .container import FormatError, read_container, write_container
from .graphgen import dynamic_graph_bands
from .montage import DEFAULT_RADIUS, normalize_graph

ABLATIONS = ("full", "pgcn-f", "pgcn-d", "pgcn-s")
HEADS = ("coarse", "fine")
CHECKPOINT_MAGIC = b"PGCNCKP1"

PgcnParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class PgcnConfig:
    n_channels: int = 62
    n_bands: int = 5
    order: int = DEFAULT_ORDER
    dyn_dim_coarse: int = 512
    static_dim_coarse: int = 256
    dyn_dim_fine: int = 512
    static_dim_fine: int = 256
    n_coarse: int = 3
    n_fine: int = 4
    radius: float = DEFAULT_RADIUS
    static_norm: str = "sym"
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        dims = (self.n_channels, self.n_bands, self.order, self.dyn_dim_coarse, self.static_dim_coarse,
                self.dyn_dim_fine, self.static_dim_fine, self.n_coarse, self.n_fine)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.static_norm not in ("sym", "row", "none"):
            raise ValueError(f"unknown static_norm {self.static_norm!r}")
        if self.n_coarse >= self.n_fine:
            raise ValueError("coarse class count must be smaller than fine class count")

    @property
    def heads(self) -> tuple[str, ...]:
        return ("fine",) if self.ablation == "pgcn-f" else HEADS

    @property
    def uses_static(self) -> bool:
        return self.ablation != "pgcn-d"

    @property
    def uses_dynamic(self) -> bool:
        return self.ablation != "pgcn-s"

    def dims(self, head: str) -> tuple[int, int]:
        """(dynamic, static) output dims of a head."""
        if head == "coarse":
            return self.dyn_dim_coarse, self.static_dim_coarse
        return self.dyn_dim_fine, self.static_dim_fine

    def head_width(self, head: str) -> int:
        dyn, static = self.dims(head)
        return static * self.uses_static + dyn * self.n_bands * self.uses_dynamic

    @property
    def fused_width(self) -> int:
        return sum(self.head_width(h) for h in self.heads)

    def classes(self, head: str) -> int:
        return self.n_coarse if head == "coarse" else self.n_fine

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PgcnConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in fields})


def head_of(name: str) -> str:
    return name.split(".", 1)[0]


def param_shapes(config: PgcnConfig) -> dict[str, tuple[int, ...]]:
    n, d, order = config.n_channels, config.n_bands, config.order
    shapes: dict[str, tuple[int, ...]] = {}
    for head in config.heads:
        dyn, static = config.dims(head)
        if config.uses_dynamic:
            shapes[f"{head}.mix"] = (n, n)
            shapes[f"{head}.bias"] = (n, d)
            shapes[f"{head}.proj"] = (d, n * d)
            shapes[f"{head}.dyn_filters"] = (d, order, d, dyn)
        if config.uses_static:
            shapes[f"{head}.static_filters"] = (order, d, static)
        in_width = n * (config.fused_width if head == "fine" else config.head_width(head))
        shapes[f"{head}.fc_weight"] = (in_width, config.classes(head))
        shapes[f"{head}.fc_bias"] = (1, config.classes(head))
    return shapes


def init_params(config: PgcnConfig, seed: int | None = None) -> PgcnParams:
    """Fan-in scaled uniform weights, zero biases, near-identity channel mixing.

    The graph projection gets an extra 1/n_channels factor so the initial
    dynamic graph has row mass well below one and its powers stay bounded.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params: PgcnParams = {}
    for name, shape in param_shapes(config).items():
        kind = name.split(".", 1)[1]
        if kind in ("bias", "fc_bias"):
            params[name] = np.zeros(shape)
        elif kind == "mix":
            params[name] = np.eye(shape[0]) + rng.uniform(-0.01, 0.01, shape)
        else:
            fan_in = shape[0] if kind in ("proj", "fc_weight") else shape[-3] * shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            if kind == "proj":
                bound /= config.n_channels
            params[name] = rng.uniform(-bound, bound, shape)
    return params


@dataclass
class ForwardOutput:
    fine_features: nk.Tensor
    fused: nk.Tensor
    logits: nk.Tensor
    probs: nk.Tensor
    log_probs: nk.Tensor
    fine_graph_bands: list[nk.Tensor] | None
    coarse_features: nk.Tensor | None = None
    coarse_logits: nk.Tensor | None = None
    coarse_probs: nk.Tensor | None = None
    coarse_log_probs: nk.Tensor | None = None

    @property
    def fine_graph(self) -> np.ndarray | None:
        """Fine-head dynamic graph as an array (..., n, n, d)."""
        if self.fine_graph_bands is None:
            return None
        return np.stack([g.value for g in self.fine_graph_bands], axis=-1)


def _head_features(config: PgcnConfig, head: str, x: nk.Tensor, leaves, static_graph):
    parts, graphs = [], None
    if config.uses_static:
        parts.append(cheb_conv(static_graph, x, leaves[f"{head}.static_filters"]))
    if config.uses_dynamic:
        graphs = dynamic_graph_bands(x, leaves[f"{head}.mix"], leaves[f"{head}.bias"], leaves[f"{head}.proj"])
        filters = band_filters(leaves[f"{head}.dyn_filters"])
        parts.extend(cheb_conv(g, x, w) for g, w in zip(graphs, filters))
    return (parts[0] if len(parts) == 1 else nk.concat(parts, axis=-1)), graphs


def _classify(feats: nk.Tensor, weights: nk.Tensor, bias: nk.Tensor) -> nk.Tensor:
    flat = nk.reshape(feats, (feats.shape[0], feats.shape[1] * feats.shape[2]))
    return nk.add(nk.matmul(flat, weights), bias)


def forward_leaves(config: PgcnConfig, leaves: Mapping[str, nk.Tensor], x, static_graph) -> ForwardOutput:
    """Forward pass on a batch ``x`` of shape (batch, n, d) or a single (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (config.n_channels, config.n_bands):
        raise nk.ShapeError(f"input {x.shape[1:]} does not match configured ({config.n_channels}, {config.n_bands})")
    xt = nk.Tensor(x)
    static_op = nk.Tensor(normalize_graph(static_graph, config.static_norm)) if config.uses_static else None

    fine_features, fine_graph = _head_features(config, "fine", xt, leaves, static_op)
    out = {}
    if "coarse" in config.heads:
        coarse_features, _ = _head_features(config, "coarse", xt, leaves, static_op)
        coarse_logits = _classify(coarse_features, leaves["coarse.fc_weight"], leaves["coarse.fc_bias"])
        out = dict(coarse_features=coarse_features, coarse_logits=coarse_logits,
                   coarse_probs=nk.row_softmax(coarse_logits), coarse_log_probs=nk.log_softmax(coarse_logits))
        fused = nk.concat([fine_features, nk.stop_gradient(coarse_features)], axis=-1)
    else:
        fused = fine_features
    logits = _classify(fused, leaves["fine.fc_weight"], leaves["fine.fc_bias"])
    return ForwardOutput(fine_features=fine_features, fused=fused, logits=logits, probs=nk.row_softmax(logits),
                         log_probs=nk.log_softmax(logits), fine_graph_bands=fine_graph, **out)


def forward(config: PgcnConfig, params: PgcnParams, x, static_graph, tape: nk.Tape | None = None) -> ForwardOutput:
    leaves = tape.watch(params) if tape is not None else {k: nk.Tensor(v) for k, v in params.items()}
    return forward_leaves(config, leaves, x, static_graph)


def predict(output: ForwardOutput) -> tuple[np.ndarray | None, np.ndarray]:
    """Arg-max labels (coarse, fine); ties go to the lowest class index."""
    coarse = None if output.coarse_probs is None else np.argmax(output.coarse_probs.value, axis=-1)
    return coarse, np.argmax(output.probs.value, axis=-1)


def _cross_entropy(log_probs: nk.Tensor, labels) -> nk.Tensor:
    labels = np.atleast_1d(np.asarray(labels))
    classes = log_probs.shape[-1]
    if labels.shape != (log_probs.shape[0],):
        raise ValueError(f"expected {log_probs.shape[0]} labels, got {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must be integers in [0, {classes})")
    picked = nk.slice_(log_probs, (np.arange(labels.size), labels))
    return nk.scalar_mul(nk.sum_(picked), -1.0)


def losses(output: ForwardOutput, coarse_labels, fine_labels) -> tuple[nk.Tensor | None, nk.Tensor]:
    """Summed cross-entropies (coarse_ce, fine_ce) over the batch; coarse_ce is None without a coarse head."""
    coarse_ce = None if output.coarse_log_probs is None else _cross_entropy(output.coarse_log_probs, coarse_labels)
    return coarse_ce, _cross_entropy(output.log_probs, fine_labels)


class Pgcn:
    """Configured model with its parameters and static graph."""

    def __init__(self, config: PgcnConfig, params: PgcnParams, static_graph: np.ndarray):
        expected = param_shapes(config)
        if set(expected) != set(params):
            raise ValueError(f"parameter names differ from config: {sorted(set(expected) ^ set(params))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise nk.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params
        self.static_graph = np.asarray(static_graph, dtype=np.float64)

    def forward(self, x, tape: nk.Tape | None = None) -> ForwardOutput:
        return forward(self.config, self.params, x, self.static_graph, tape)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        return np.concatenate(
            [predict(self.forward(x[i : i + batch_size]))[1] for i in range(0, len(x), batch_size)]
        ) if len(x) else np.zeros(0, dtype=int)

    def dynamic_graphs(self, x) -> np.ndarray:
        """Fine-head dynamic graphs, (batch, n, n, d)."""
        out = self.forward(x)
        if out.fine_graph is None:
            raise ValueError("model has no dynamic graph (pgcn-s ablation)")
        return out.fine_graph

    def embeddings(self, x) -> np.ndarray:
        """Flattened ``fused`` rows, one per sample."""
        feats = self.forward(x).fused.value
        return feats.reshape(feats.shape[0], -1)


def save_checkpoint(path: str | Path, config: PgcnConfig, params: PgcnParams, *, step: int = 0,
                    extra: Mapping[str, Any] | None = None,
                    extra_arrays: Mapping[str, np.ndarray] | None = None) -> None:
    header = {"format": "pgcn-checkpoint", "version": 1, "config": config.to_dict(),
              "seed": config.seed, "step": step, "extra": dict(extra or {})}
    arrays = {f"param:{k}": v for k, v in params.items()}
    arrays.update({f"state:{k}": v for k, v in (extra_arrays or {}).items()})
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path: str | Path) -> tuple[PgcnConfig, PgcnParams, dict[str, Any], dict[str, np.ndarray]]:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = PgcnConfig.from_dict(header["config"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param:")}
    state = {k[6:]: v for k, v in arrays.items() if k.startswith("state:")}
    return config, params, header, state
