"""Instance-adaptive dynamic graphs: ``relu((mix x + bias) proj)`` reshaped to n x n x d."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk


@dataclass
class GraphGenParams:
    mix: np.ndarray  # (n, n)
    bias: np.ndarray  # (n, d)
    proj: np.ndarray  # (d, n*d)

    def __post_init__(self):
        n, d = self.bias.shape
        if self.mix.shape != (n, n) or self.proj.shape != (d, n * d):
            raise nk.ShapeError(
                f"graph generator shapes mix{self.mix.shape} bias{self.bias.shape} "
                f"proj{self.proj.shape} are inconsistent"
            )


def dynamic_graph(x, mix, bias, proj) -> nk.Tensor:
    """Dynamic graph for a feature matrix ``x`` (n, d) or a stack (batch, n, d).

    The n x (n*d) product is reshaped row-major, so band is the fastest axis:
    ``graph[..., i, j, b] = product[..., i, j*d + b]``.
    """
    x = x if isinstance(x, nk.Tensor) else nk.Tensor(x)
    n, d = x.shape[-2:]
    if mix.shape != (n, n) or bias.shape != (n, d) or proj.shape != (d, n * d):
        raise nk.ShapeError(f"x{x.shape} does not match mix{mix.shape} bias{bias.shape} proj{proj.shape}")
    mixed = nk.relu(nk.matmul(nk.add(nk.matmul(mix, x), bias), proj))
    return nk.reshape(mixed, x.shape[:-2] + (n, n, d))


def dynamic_graph_bands(x, mix, bias, proj) -> list[nk.Tensor]:
    """Per-band slices ``graph[..., b]`` of :func:`dynamic_graph`, built band by band.

    Band ``b`` only needs the columns ``b, b+d, b+2d, ...`` of ``proj``, so the full
    n x n x d tensor is never materialised.
    """
    x = x if isinstance(x, nk.Tensor) else nk.Tensor(x)
    n, d = x.shape[-2:]
    if mix.shape != (n, n) or bias.shape != (n, d) or proj.shape != (d, n * d):
        raise nk.ShapeError(f"x{x.shape} does not match mix{mix.shape} bias{bias.shape} proj{proj.shape}")
    mixed = nk.add(nk.matmul(mix, x), bias)
    return [nk.relu(nk.matmul(mixed, nk.slice_(proj, (slice(None), slice(b, None, d))))) for b in range(d)]


def dynamic_graph_array(x: np.ndarray, params: GraphGenParams) -> np.ndarray:
    return dynamic_graph(x, nk.Tensor(params.mix), nk.Tensor(params.bias), nk.Tensor(params.proj)).value
