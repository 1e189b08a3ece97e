"""End-to-end acceptance checks, one test per criterion."""
import hashlib
import math
import time

import numpy as np
import pytest

from pgcn import numkit as nk
from pgcn.chebconv import cheb_conv
from pgcn.cli import main
from pgcn.datasets import SynthConfig, synth_generate
from pgcn.evaluation import run_protocol, split_loso, split_subject_dependent
from pgcn.features import band_energy, band_filter, de_feature
from pgcn.graphgen import GraphGenParams, dynamic_graph_array
from pgcn.model import PgcnConfig, forward, init_params, losses
from pgcn.montage import build_static_graph, builtin_montage
from pgcn.trainer import TrainConfig, train

from conftest import ring_graph, toy_config

criterion = pytest.mark.criterion

# desk-scale model for the synthetic end-to-end runs
SYNTH_MODEL = dict(n_channels=62, n_bands=5, order=5, dyn_dim_coarse=4, static_dim_coarse=4, dyn_dim_fine=4, static_dim_fine=4,
                   n_coarse=3, n_fine=7)
SYNTH_TRAIN = dict(epochs=30, lr=1e-3, steps=4, batch_size=32)


@criterion(1, "gradient check on the toy model")
def test_gradient_integrity(tmp_path, measured, capsys):
    started = time.perf_counter()
    code = main(["gradcheck", "--out", str(tmp_path / "gc.json")])
    elapsed = time.perf_counter() - started
    import json
    err = json.loads((tmp_path / "gc.json").read_text())["max_rel_error"]
    measured.update(max_rel_error=f"{err:.2e}", seconds=f"{elapsed:.1f}")
    assert code == 0
    assert err < 1e-4
    assert elapsed < 60


@criterion(2, "head isolation over 100 random inputs")
def test_head_isolation(measured):
    config = toy_config()
    params, graph = init_params(config), ring_graph(config.n_channels)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(1, config.n_channels, config.n_bands))
        tape = nk.Tape()
        out = forward(config, params, x, graph, tape)
        coarse_ce, fine_ce = losses(out, rng.integers(0, config.n_coarse, 1), rng.integers(0, config.n_fine, 1))
        g_fine, g_coarse = nk.backward(tape, fine_ce), nk.backward(tape, coarse_ce)
        for name in params:
            leak = g_fine[name] if name.startswith("coarse.") else g_coarse[name]
            worst = max(worst, float(np.abs(leak).max()))
    measured["max_cross_gradient"] = worst
    assert worst == 0.0


@criterion(3, "coarse head changes only every 4th iteration")
def test_staggered_schedule(measured):
    ds = synth_generate(SynthConfig(subjects=2, trials=5, segments=8, n_channels=8, n_bands=3, seed=3))  # 80 samples
    config = toy_config(n_fine=7)

    def digest(params):
        h = hashlib.sha256()
        for k in sorted(params):
            if k.startswith("coarse."):
                h.update(params[k].tobytes())
        return h.hexdigest()

    hashes = [digest(init_params(config))]
    train(ds, config, TrainConfig(epochs=4, steps=4, batch_size=8), ring_graph(8),
          on_iteration=lambda i, p: hashes.append(digest(p)))
    changed = [hashes[i + 1] != hashes[i] for i in range(len(hashes) - 1)]
    measured.update(iterations=len(changed), coarse_changes=sum(changed))
    assert len(changed) == 40
    assert changed == [i % 4 == 0 for i in range(40)]


@criterion(4, "graph convolution is permutation equivariant")
def test_permutation_equivariance(measured):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 12))
        perm = rng.permutation(n)
        graph, x, weights = rng.normal(size=(n, n)) / n, rng.normal(size=(n, 4)), rng.normal(size=(5, 4, 3))
        direct = cheb_conv(graph, x, weights).value[perm]
        permuted = cheb_conv(graph[np.ix_(perm, perm)], x[perm], weights).value
        worst = max(worst, float(np.abs(direct - permuted).max()))
    measured["max_abs_diff"] = f"{worst:.1e}"
    assert worst <= 1e-10


@criterion(5, "dynamic graphs are nonnegative")
def test_dynamic_graph_nonnegative(measured):
    rng = np.random.default_rng(5)
    lowest = np.inf
    for _ in range(1000):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        params = GraphGenParams(rng.normal(size=(n, n)), rng.normal(size=(n, d)), rng.normal(size=(d, n * d)))
        lowest = min(lowest, float(dynamic_graph_array(rng.normal(scale=10, size=(n, d)), params).min()))
    measured["min_entry"] = lowest
    assert lowest >= 0


def synth_run(ablation, subject_strength=1.0, seed=0):
    ds = synth_generate(SynthConfig(subjects=10, trials=8, segments=30, n_fine=7, scheme="mped-like",
                                    separation=0.5, noise=1.0, subject_strength=subject_strength, seed=0))
    config = PgcnConfig(**SYNTH_MODEL, ablation=ablation, seed=seed)
    plan = split_subject_dependent(ds, 7)
    graph = build_static_graph(builtin_montage())
    return run_protocol(ds, plan, config, TrainConfig(**SYNTH_TRAIN, seed=seed), graph).report


@pytest.mark.slow
@criterion(6, "synthetic subject-dependent accuracy >= 0.90 in under 5 minutes")
def test_synthetic_end_to_end(measured):
    started = time.perf_counter()
    report = synth_run("full")
    elapsed = time.perf_counter() - started
    measured.update(accuracy=f"{report.mean:.4f}", chance=f"{1 / 7:.3f}", seconds=f"{elapsed:.0f}")
    assert report.mean >= 0.90
    assert elapsed < 300


@pytest.mark.slow
@criterion(7, "dual head beats fine-only over 5 seeds with strong subject effects")
def test_hierarchy_benefit_direction(measured):
    full, fine_only = [], []
    for seed in range(5):
        full.append(synth_run("full", subject_strength=3.0, seed=seed).mean)
        fine_only.append(synth_run("pgcn-f", subject_strength=3.0, seed=seed).mean)
    measured.update(full=f"{np.mean(full):.4f}", pgcn_f=f"{np.mean(fine_only):.4f}")
    assert np.mean(full) >= np.mean(fine_only)


@criterion(8, "feature oracles for differential entropy and band energy")
def test_feature_oracles(measured):
    fs = 200.0
    noise = np.random.default_rng(8).standard_normal((1, int(10 * fs)))
    de = float(de_feature(noise)[0])
    t = np.arange(int(10 * fs)) / fs
    energy = float(band_energy(band_filter(np.sin(2 * np.pi * 10 * t)[None], fs, (8, 14)))[0])
    measured.update(de=f"{de:.5f}", energy=f"{energy:.6f}")
    assert abs(de - 0.5 * math.log(2 * math.pi * math.e)) <= 0.05
    assert abs(energy - 0.5) <= 1e-3


def trial_sets(ds, index):
    return sorted(set(zip(ds.session[index].tolist(), ds.trial[index].tolist())))


@criterion(9, "subject-dependent splits and leave-one-subject-out folds")
def test_protocols(measured):
    for total, n_train in ((24, 16), (28, 21)):
        ds = synth_generate(SynthConfig(subjects=3, trials=total, sessions=3, segments=2, n_channels=4, n_bands=3,
                                        n_fine=4 if total == 24 else 7,
                                        scheme="seed4-like" if total == 24 else "mped-like"))
        for fold in split_subject_dependent(ds, n_train):
            for sess in range(3):
                assert [t for s, t in trial_sets(ds, fold.train) if s == sess] == list(range(n_train))
                assert [t for s, t in trial_sets(ds, fold.test) if s == sess] == list(range(n_train, total))
        measured[f"{total}_trials"] = f"{n_train}/{total - n_train}"
    plan = split_loso(ds)
    tests = np.concatenate([f.test for f in plan])
    assert np.array_equal(np.sort(tests), np.arange(len(ds)))
    for fold in plan:
        assert fold.held_out_subject not in ds.subject[fold.train]
        assert set(ds.subject[fold.test].tolist()) == {fold.held_out_subject}
    measured["loso_folds"] = len(plan)


@criterion(10, "softmax rows sum to one and uniform loss is log of the class count")
def test_softmax_and_loss_identities(measured):
    config = toy_config(n_fine=7)
    rng = np.random.default_rng(10)
    out = forward(config, init_params(config), 3 * rng.normal(size=(64, config.n_channels, config.n_bands)), ring_graph(config.n_channels))
    row_err = max(float(np.abs(out.probs.value.sum(axis=1) - 1).max()),
                  float(np.abs(out.coarse_probs.value.sum(axis=1) - 1).max()))
    zero = {k: np.zeros_like(v) for k, v in init_params(config).items()}
    uniform = forward(config, zero, rng.normal(size=(1, config.n_channels, config.n_bands)), ring_graph(config.n_channels))
    fine_ce = float(losses(uniform, [0], [4])[1].value)
    measured.update(row_sum_error=f"{row_err:.1e}", loss_error=f"{abs(fine_ce - math.log(7)):.1e}")
    assert row_err <= 1e-9
    assert abs(fine_ce - math.log(7)) <= 1e-9
