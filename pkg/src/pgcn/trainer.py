"""Staggered dual-head training.

Every iteration runs both heads forward and computes both losses. The fine head
is updated from ``grad(fine_ce)`` every iteration; the coarse head is updated from
``grad(coarse_ce)`` only on iterations whose global index is a multiple of ``steps``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import numkit as nk
from .datasets import LabeledDataset
from .model import PgcnConfig, PgcnParams, forward, head_of, init_params, losses, predict

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    steps: int = 4
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    kind: str = "adam"
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def sgd_or_adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Return updated copies of the parameters named in ``grads``."""
    out = {}
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise nk.ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise nk.NonFiniteError(f"non-finite gradient for {name}")
        if state.kind == "sgd":
            out[name] = theta - lr * g
            continue
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1 - beta2) * g * g
        t = state.t.get(name, 0) + 1
        state.m[name], state.v[name], state.t[name] = m, v, t
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


@dataclass
class TrainState:
    """Counters and optimiser moments carried across resumed runs."""

    iteration: int = 0
    epoch: int = 0
    fine_updates: int = 0
    coarse_updates: int = 0
    optimizer: OptimizerState = field(default_factory=OptimizerState)

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"iteration": self.iteration, "epoch": self.epoch, "fine_updates": self.fine_updates,
                "coarse_updates": self.coarse_updates, "optimizer": self.optimizer.kind,
                "adam_t": dict(self.optimizer.t)}
        arrays = {f"m:{k}": v for k, v in self.optimizer.m.items()}
        arrays.update({f"v:{k}": v for k, v in self.optimizer.v.items()})
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> "TrainState":
        opt = OptimizerState(
            kind=meta.get("optimizer", "adam"),
            m={k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m:")},
            v={k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v:")},
            t={k: int(v) for k, v in meta.get("adam_t", {}).items()},
        )
        return cls(int(meta.get("iteration", 0)), int(meta.get("epoch", 0)),
                   int(meta.get("fine_updates", 0)), int(meta.get("coarse_updates", 0)), opt)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    fine_updates: int = 0
    coarse_updates: int = 0

    def write_jsonl(self, path: str | Path, append: bool = False) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


IterationHook = Callable[[int, PgcnParams], None]


def train(
    dataset: LabeledDataset,
    model_config: PgcnConfig,
    train_config: TrainConfig,
    static_graph: np.ndarray,
    *,
    params: PgcnParams | None = None,
    state: TrainState | None = None,
    on_iteration: IterationHook | None = None,
) -> tuple[PgcnParams, TrainLog, TrainState]:
    """Optimise a model on ``dataset``; resumes from ``params``/``state`` when given."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.fine.max() >= model_config.n_fine or dataset.coarse.max() >= model_config.n_coarse:
        raise ValueError("dataset labels exceed the configured class counts")
    params = dict(init_params(model_config) if params is None else params)
    state = state or TrainState(optimizer=OptimizerState(kind=train_config.optimizer))
    state.optimizer.kind = train_config.optimizer
    fine_names = [k for k in params if head_of(k) == "fine"]
    coarse_names = [k for k in params if head_of(k) == "coarse"]
    x, yf, yc = dataset.features, dataset.fine, dataset.coarse
    total, batch = len(dataset), train_config.batch_size
    history = TrainLog()

    for _ in range(train_config.epochs):
        started = time.perf_counter()
        order = np.random.default_rng([train_config.seed, 0x5EED, state.epoch]).permutation(total)
        fine_loss = coarse_loss = 0.0
        correct = 0
        for start in range(0, total, batch):
            idx = order[start : start + batch]
            tape = nk.Tape()
            try:
                out = forward(model_config, params, x[idx], static_graph, tape)
                coarse_ce, fine_ce = losses(out, yc[idx], yf[idx])
                grads = nk.backward(tape, fine_ce, fine_names)
                params.update(sgd_or_adam_step(params, grads, state.optimizer, train_config.lr))
                state.fine_updates += 1
                if coarse_ce is not None and state.iteration % train_config.steps == 0:
                    grads_c = nk.backward(tape, coarse_ce, coarse_names)
                    params.update(sgd_or_adam_step(params, grads_c, state.optimizer, train_config.lr))
                    state.coarse_updates += 1
            except nk.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {state.epoch}, iteration {state.iteration}: {exc}"
                ) from exc
            fine_loss += float(fine_ce.value)
            coarse_loss += 0.0 if coarse_ce is None else float(coarse_ce.value)
            correct += int(np.sum(predict(out)[1] == yf[idx]))
            if on_iteration is not None:
                on_iteration(state.iteration, params)
            state.iteration += 1
        record = {
            "epoch": state.epoch,
            "fine_loss": fine_loss / total,
            "coarse_loss": coarse_loss / total,
            "train_accuracy": correct / total,
            "wall_time": time.perf_counter() - started,
            "fine_updates": state.fine_updates,
            "coarse_updates": state.coarse_updates,
        }
        history.records.append(record)
        log.debug("epoch %d fine %.4f coarse %.4f acc %.3f", state.epoch, record["fine_loss"],
                  record["coarse_loss"], record["train_accuracy"])
        state.epoch += 1
    history.fine_updates, history.coarse_updates = state.fine_updates, state.coarse_updates
    return params, history, state


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
