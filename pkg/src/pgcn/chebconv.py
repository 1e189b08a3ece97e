"""Multi-order graph convolution ``sum_k graph^k @ x @ weights[k]`` and its per-band form."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numkit as nk

DEFAULT_ORDER = 5


def graph_powers(graph, order: int) -> list[nk.Tensor]:
    """``[graph^0, graph^1, ..., graph^(order-1)]`` with ``graph^0`` the identity."""
    graph = graph if isinstance(graph, nk.Tensor) else nk.Tensor(graph)
    if graph.ndim < 2 or graph.shape[-1] != graph.shape[-2]:
        raise nk.ShapeError(f"graph must be square, got {graph.shape}")
    if order < 1:
        raise ValueError("order must be >= 1")
    eye = nk.Tensor(np.broadcast_to(np.eye(graph.shape[-1]), graph.shape))
    powers = [eye]
    for _ in range(1, order):
        powers.append(graph if len(powers) == 1 else nk.matmul(graph, powers[-1]))
    return powers


def cheb_conv(graph, x, weights) -> nk.Tensor:
    """Graph convolution with per-order weights of shape (order, d_in, out_dim).

    Propagates ``hop_k = graph @ hop_(k-1)`` instead of forming powers of
    ``graph``, then applies every order in one product against the stacked weights.
    """
    graph = graph if isinstance(graph, nk.Tensor) else nk.Tensor(graph)
    x = x if isinstance(x, nk.Tensor) else nk.Tensor(x)
    weights = weights if isinstance(weights, nk.Tensor) else nk.Tensor(weights)
    if weights.ndim != 3:
        raise nk.ShapeError(f"filter must be (order, d_in, out_dim), got {weights.shape}")
    order, d_in, out_dim = weights.shape
    if x.shape[-1] != d_in:
        raise nk.ShapeError(f"x has {x.shape[-1]} features but filter expects {d_in}")
    if graph.shape[-1] != graph.shape[-2] or graph.shape[-1] != x.shape[-2]:
        raise nk.ShapeError(f"graph {graph.shape} does not match x {x.shape}")
    hops = [x]
    for _ in range(1, order):
        hops.append(nk.matmul(graph, hops[-1]))
    stacked = hops[0] if order == 1 else nk.concat(hops, axis=-1)
    return nk.matmul(stacked, nk.reshape(weights, (order * d_in, out_dim)))


def cheb_conv_reference(graph: np.ndarray, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Direct sum over explicit matrix powers (test oracle)."""
    out = np.zeros(x.shape[:-1] + (weights.shape[-1],))
    power = np.eye(graph.shape[-1])
    for k in range(weights.shape[0]):
        out = out + power @ x @ weights[k]
        power = graph @ power
    return out


def dynamic_conv(dyn_graph, x, filters: Sequence) -> nk.Tensor:
    """Concatenate ``cheb_conv(dyn_graph[..., b], x, filters[b])`` over bands."""
    dyn_graph = dyn_graph if isinstance(dyn_graph, nk.Tensor) else nk.Tensor(dyn_graph)
    d = dyn_graph.shape[-1]
    if len(filters) != d:
        raise nk.ShapeError(f"{d} graph slices but {len(filters)} filters")
    outs = [cheb_conv(nk.slice_(dyn_graph, (..., b)), x, filters[b]) for b in range(d)]
    return outs[0] if d == 1 else nk.concat(outs, axis=-1)


def band_filters(weights) -> list[nk.Tensor]:
    """Split a stacked (d, order, d_in, out_dim) filter bank into per-band filters."""
    weights = weights if isinstance(weights, nk.Tensor) else nk.Tensor(weights)
    return [nk.slice_(weights, b) for b in range(weights.shape[0])]
