"""Evaluation protocols, metrics and electrode-contribution maps."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datasets import LabeledDataset
from .features import BAND_NAMES
from .model import Pgcn, PgcnConfig
from .trainer import TrainConfig, TrainLog, train


class Predictor(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    test: np.ndarray
    fold_id: int
    held_out_subject: int | None = None


def check_plan(plan: Sequence[Fold]) -> None:
    for fold in plan:
        if len(fold.test) == 0:
            raise ValueError(f"fold {fold.fold_id} has an empty test set")
        if np.intersect1d(fold.train, fold.test).size:
            raise ValueError(f"fold {fold.fold_id} leaks samples between train and test")


def _trial_ordinals(ds: LabeledDataset) -> np.ndarray:
    """Rank of each sample's trial id within its (subject, session)."""
    ordinals = np.empty(len(ds), dtype=np.int64)
    for key in sorted(set(zip(ds.subject.tolist(), ds.session.tolist()))):
        mask = (ds.subject == key[0]) & (ds.session == key[1])
        trials = np.unique(ds.trial[mask])
        ordinals[mask] = np.searchsorted(trials, ds.trial[mask])
    return ordinals


def split_subject_dependent(ds: LabeledDataset, train_trials: int) -> list[Fold]:
    """One fold per subject: the first ``train_trials`` trials of every session train."""
    if train_trials < 1:
        raise ValueError("train_trials must be >= 1")
    ordinals = _trial_ordinals(ds)
    for s, sess in sorted(set(zip(ds.subject.tolist(), ds.session.tolist()))):
        count = np.unique(ds.trial[(ds.subject == s) & (ds.session == sess)]).size
        if count <= train_trials:
            raise ValueError(f"subject {s} session {sess} has {count} trials; need more than {train_trials}")
    plan = []
    for fold_id, s in enumerate(np.unique(ds.subject)):
        mine = ds.subject == s
        plan.append(Fold(np.flatnonzero(mine & (ordinals < train_trials)),
                         np.flatnonzero(mine & (ordinals >= train_trials)), fold_id, None))
    return plan


def split_loso(ds: LabeledDataset) -> list[Fold]:
    """Leave-one-subject-out: each subject is the test set once."""
    subjects = np.unique(ds.subject)
    if subjects.size < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    return [
        Fold(np.flatnonzero(ds.subject != s), np.flatnonzero(ds.subject == s), i, int(s))
        for i, s in enumerate(subjects)
    ]


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def band_labels(d: int) -> tuple[str, ...]:
    return BAND_NAMES if d == len(BAND_NAMES) else tuple(f"band{b}" for b in range(d))


@dataclass
class RunReport:
    fold_ids: list[int]
    fold_accuracies: list[float]
    confusion: np.ndarray
    held_out: list[int | None] = field(default_factory=list)
    scalp: np.ndarray | None = None  # (d, n)
    channel_names: tuple[str, ...] = ()

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        """Population standard deviation across folds."""
        return float(np.std(self.fold_accuracies))

    def to_dict(self) -> dict:
        return {
            "folds": [
                {"fold": f, "accuracy": a, "held_out_subject": h}
                for f, a, h in zip(self.fold_ids, self.fold_accuracies, self.held_out or [None] * len(self.fold_ids))
            ],
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "confusion": self.confusion.tolist(),
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_confusion_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["truth"] + [f"pred_{j}" for j in range(self.confusion.shape[1])])
            for i, row in enumerate(self.confusion):
                w.writerow([i] + row.tolist())

    def write_scalp_csv(self, path: str | Path) -> None:
        if self.scalp is None:
            raise ValueError("report has no scalp map")
        write_scalp_csv(path, self.scalp, self.channel_names)


def evaluate(models: Predictor | Sequence[Predictor], dataset: LabeledDataset, plan: Sequence[Fold]) -> RunReport:
    """Fine-label accuracy per fold and the pooled confusion matrix.

    ``models`` is one predictor per fold, or a single predictor used for all.
    """
    check_plan(plan)
    if not isinstance(models, Sequence):
        models = [models] * len(plan)
    if len(models) != len(plan):
        raise ValueError(f"{len(models)} models for {len(plan)} folds")
    classes = dataset.n_fine
    cm = np.zeros((classes, classes), dtype=np.int64)
    accs = []
    for model, fold in zip(models, plan):
        truth = dataset.fine[fold.test]
        pred = np.asarray(model.predict(dataset.features[fold.test]))
        cm += confusion_matrix(truth, pred, classes)
        accs.append(float(np.mean(pred == truth)))
    return RunReport([f.fold_id for f in plan], accs, cm, [f.held_out_subject for f in plan],
                     channel_names=tuple(dataset.channel_names))


def scalp_map(model: Pgcn, x: np.ndarray) -> np.ndarray:
    """Per-band electrode contributions from the fine-head dynamic graph, (d, n).

    For band b and electrode i: mean over samples of the average of row i's and
    column i's mass, then min-max normalised per band (constant bands become 0).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if len(x) == 0:
        raise ValueError("scalp map needs at least one sample")
    total = None
    for start in range(0, len(x), 256):
        graph = model.dynamic_graphs(x[start : start + 256])  # (batch, n, n, d)
        mass = 0.5 * (graph.sum(axis=2) + graph.sum(axis=1))  # (batch, n, d)
        part = mass.sum(axis=0)
        total = part if total is None else total + part
    return minmax_rows((total / len(x)).T)


def minmax_rows(values: np.ndarray) -> np.ndarray:
    lo = values.min(axis=1, keepdims=True)
    span = values.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def write_scalp_csv(path: str | Path, scalp: np.ndarray, channel_names: Sequence[str] = ()) -> None:
    d, n = scalp.shape
    names = list(channel_names) or [f"ch{i}" for i in range(n)]
    bands = band_labels(d)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["electrode", "band", "value"])
        for b in range(d):
            for i in range(n):
                w.writerow([names[i], bands[b], repr(float(scalp[b, i]))])


def write_embeddings_csv(path: str | Path, model: Pgcn, dataset: LabeledDataset, index=None) -> None:
    """Flattened fused rows with their labels, for external plotting."""
    index = np.arange(len(dataset)) if index is None else np.asarray(index)
    emb = model.embeddings(dataset.features[index]) if len(index) else np.zeros((0, 0))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "subject", "fine", "coarse"] + [f"h{j}" for j in range(emb.shape[1])])
        for row, i in zip(emb, index):
            w.writerow([int(i), int(dataset.subject[i]), int(dataset.fine[i]), int(dataset.coarse[i])]
                       + [repr(float(v)) for v in row])


@dataclass
class ProtocolResult:
    report: RunReport
    models: list[Pgcn]
    logs: list[TrainLog]


def run_protocol(
    dataset: LabeledDataset,
    plan: Sequence[Fold],
    model_config: PgcnConfig,
    train_config: TrainConfig,
    static_graph: np.ndarray,
    *,
    jobs: int = 1,
    maps: bool = False,
) -> ProtocolResult:
    """Train one model per fold, then evaluate each on its held-out samples."""
    check_plan(plan)

    def run(fold: Fold) -> tuple[Pgcn, TrainLog]:
        params, history, _ = train(dataset.subset(fold.train), model_config, train_config, static_graph)
        return Pgcn(model_config, params, static_graph), history

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, plan))
    else:
        results = [run(f) for f in plan]
    models = [m for m, _ in results]
    report = evaluate(models, dataset, plan)
    if maps and model_config.uses_dynamic:
        report.scalp = minmax_rows(np.mean([scalp_map(m, dataset.features[f.test]) for m, f in zip(models, plan)], axis=0))
    return ProtocolResult(report, models, [h for _, h in results])
