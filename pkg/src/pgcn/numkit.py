"""Small dense reverse-mode differentiation core.

Every value is a float64 numpy array wrapped in an immutable :class:`Tensor`.
Operations performed on tensors that belong to a :class:`Tape` are recorded in
creation order, which is already a topological order, so :func:`backward` is a
single reverse sweep.

Matrix products accept stacked operands (a leading batch axis), and ``add``
follows numpy broadcasting; both reduce gradients back to the operand shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "relu",
    "concat",
    "reshape",
    "slice_",
    "row_softmax",
    "log_softmax",
    "log",
    "sum_",
    "scalar_mul",
    "stop_gradient",
    "backward",
    "finite_diff_check",
    "kink_margin",
    "corrupt_vjp",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient contains NaN or Inf."""


# Test hook: op name -> factor applied to that op's vector-Jacobian products.
_VJP_CORRUPTION: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_vjp(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the VJP of ``op`` by ``factor`` while active (gradient-check hook)."""
    _VJP_CORRUPTION[op] = factor
    try:
        yield
    finally:
        _VJP_CORRUPTION.pop(op, None)


class Tensor:
    __slots__ = ("value", "tape", "parents", "vjp", "op", "name")

    def __init__(self, value, tape=None, parents=(), vjp=None, op="const", name=None, copy=True):
        arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite result in {op!r}")
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications plus the parameter leaves."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, value, name: str) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        t = Tensor(value, tape=self, op="leaf", name=name)
        self.leaves[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value, tape=None, op="const")

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.leaf(v, k) for k, v in params.items()}


def _all_finite(arr: np.ndarray) -> bool:
    # the sum is finite whenever every entry is, barring overflow near 1e308
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return True
    return bool(np.all(np.isfinite(arr)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _make(op: str, value, parents: Sequence[Tensor], vjp) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value, op=op, copy=False)
    return Tensor(value, tape=tape, parents=parents, vjp=vjp, op=op, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 2 and av.ndim > 2:
            # shared right operand: fold the batch into one product
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        if av.ndim == 2 and bv.ndim > 2:
            gb_t = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
            ga = gb_t @ np.moveaxis(bv, -2, 0).reshape(bv.shape[-2], -1).T
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0  # subgradient 0 at the kink
    return _make("relu", np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def slice_(a, index) -> Tensor:
    """``a[index]`` for any numpy index (basic or integer-array)."""
    a = _as_tensor(a)
    try:
        out = np.array(a.value[index])
    except IndexError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def vjp(g):
        full = np.zeros(src)
        if advanced:
            np.add.at(full, index, g)  # repeated indices accumulate
        else:
            full[index] = g
        return (full,)

    return _make("slice", out, (a,), vjp)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    y = _softmax(a.value)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("row_softmax", y, (a,), vjp)


def log_softmax(a) -> Tensor:
    """Numerically stable ``log(row_softmax(a))``."""
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = np.exp(out)

    def vjp(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log of a non-positive value")
    av = a.value
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis)
    src = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", out, (a,), vjp)


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scalar_mul", c * a.value, (a,), lambda g: (c * g,))


def stop_gradient(a) -> Tensor:
    """Same value, no path back to ``a``."""
    a = _as_tensor(a)
    return Tensor(a.value, op="stop_gradient")


def backward(tape: Tape, loss: Tensor, wrt: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to the tape's parameter leaves.

    Leaves the loss does not reach get an all-zero gradient.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    names = list(tape.leaves) if wrt is None else list(wrt)
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None) if node.vjp is not None else grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            factor = _VJP_CORRUPTION.get(node.op)
            for parent, pg in zip(node.parents, parent_grads):
                if parent.tape is None:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = {}
    for name in names:
        leaf = tape.leaves[name]
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        out[name] = g.reshape(leaf.shape)
    return out


def kink_margin(tape: Tape) -> float:
    """Smallest |input| of any ReLU on the tape (inf if there is none)."""
    margins = [np.abs(node.parents[0].value).min() for node in tape.nodes if node.op == "relu" and node.parents]
    return float(min(margins, default=np.inf))


def finite_diff_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    *,
    wrt: Sequence[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar loss from watched leaves. The error of one coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``. Only the
    parameters named in ``wrt`` are perturbed (all by default). With
    ``max_coords`` set, that many coordinates per parameter are sampled.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = f(tape, tape.watch(params))
    analytic = backward(tape, loss)

    def evaluate(p) -> float:
        value = float(f(Tape(), {k: Tensor(v) for k, v in p.items()}).value)
        if not np.isfinite(value):
            raise NonFiniteError("non-finite evaluation during finite differences")
        return value

    worst = 0.0
    for name in (list(params) if wrt is None else list(wrt)):
        base = params[name]
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(base.size, max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(flat, base.shape)
            probe = dict(params)
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            probe[name] = plus
            fp = evaluate(probe)
            probe[name] = minus
            fm = evaluate(probe)
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
