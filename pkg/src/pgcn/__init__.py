"""Dual-head graph convolution network for hierarchical EEG emotion recognition."""

__version__ = "0.1.0"

from .datasets import LabeledDataset, SynthConfig, load_dataset, save_dataset, synth_generate
from .evaluation import evaluate, run_protocol, scalp_map, split_loso, split_subject_dependent
from .model import Pgcn, PgcnConfig, forward, init_params, losses, predict
from .montage import build_static_graph, builtin_montage, load_montage
from .trainer import TrainConfig, train

__all__ = [
    "LabeledDataset", "SynthConfig", "load_dataset", "save_dataset", "synth_generate",
    "evaluate", "run_protocol", "scalp_map", "split_loso", "split_subject_dependent",
    "Pgcn", "PgcnConfig", "forward", "init_params", "losses", "predict",
    "build_static_graph", "builtin_montage", "load_montage",
    "TrainConfig", "train",
]
