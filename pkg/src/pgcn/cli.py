"""``pgcn`` command line: synth, synth-raw, featurize, train, eval, gradcheck.

Exit status is 0 on success, 2 for bad input or configuration and 3 when a
computation produces non-finite values or a gradient check fails.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import numkit as nk
from .container import FormatError
from .datasets import SCHEMES, LabeledDataset, SynthConfig, from_feature_matrices, load_dataset, save_dataset, \
    synth_generate, synth_recording, trial_label
from .evaluation import (
    evaluate,
    run_protocol,
    scalp_map,
    split_loso,
    split_subject_dependent,
    write_embeddings_csv,
)
from .features import DEFAULT_BANDS, featurize, load_recording, normalize_kind, parse_bands, \
    save_recording
from .model import ABLATIONS, Pgcn, PgcnConfig, forward_leaves, init_params, load_checkpoint, losses, \
    save_checkpoint
from .montage import DEFAULT_RADIUS, Montage, build_static_graph, load_montage, ring_montage
from .trainer import TrainConfig, TrainingDiverged, TrainState, train

log = logging.getLogger("pgcn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _load_config_file(path: str) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    if p.suffix == ".json":
        data = json.loads(p.read_text(encoding="utf-8"))
        data = data.get("config", data)  # a run manifest works as a config file
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    return {k.replace("-", "_"): v for k, v in data.items()}


def _prepare_out(path: str | Path, force: bool, is_dir: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        if not is_dir or any(path.iterdir()):
            raise CliError(f"{path} already exists (use --force to overwrite)")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, command: str, args: argparse.Namespace, artifacts: Sequence[Path],
                    extra: dict | None = None) -> Path:
    config = {k: v for k, v in vars(args).items()
              if k not in ("func", "config", "force", "command", "corrupt_vjp", "verbose")}
    manifest = {
        "tool": "pgcn",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "artifacts": {str(p.name): _sha256(p) for p in artifacts if p.is_file()},
    }
    manifest.update(extra or {})
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _bands(args) -> tuple[tuple[float, float], ...]:
    return parse_bands(args.bands) if args.bands else DEFAULT_BANDS


def default_static_graph(ds: LabeledDataset, montage: str = "builtin", radius: float | None = None) -> np.ndarray:
    """Static graph for a dataset's channels.

    Uses the montage when its channel count matches; otherwise places the
    channels on a ring and links each to its two neighbours.
    """
    m = load_montage(montage)
    if m.n_channels == ds.n_channels:
        if ds.channel_names and set(ds.channel_names) == set(m.names):
            order = [m.names.index(c) for c in ds.channel_names]
            m = Montage(tuple(ds.channel_names), m.positions[order])
        return build_static_graph(m, radius or DEFAULT_RADIUS)
    if montage != "builtin":
        raise CliError(f"montage has {m.n_channels} electrodes but the dataset has {ds.n_channels} channels")
    ring = ring_montage(ds.n_channels)
    return build_static_graph(ring, radius or 1.1 * 2 * np.pi / max(ds.n_channels, 3))


def _model_config(args, ds: LabeledDataset) -> PgcnConfig:
    return PgcnConfig(
        n_channels=ds.n_channels, n_bands=ds.n_bands, order=args.k_order,
        dyn_dim_coarse=args.dyn_dim, static_dim_coarse=args.static_dim,
        dyn_dim_fine=args.dyn_dim, static_dim_fine=args.static_dim,
        n_coarse=ds.n_coarse, n_fine=ds.n_fine,
        radius=args.radius or DEFAULT_RADIUS, static_norm=args.static_norm,
        ablation=args.ablation, seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, steps=args.steps, batch_size=args.batch,
                       seed=args.seed, optimizer=args.optimizer)


def _load_dataset(path: str) -> LabeledDataset:
    if not path:
        raise CliError("--dataset is required")
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}")
    return load_dataset(path)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = _prepare_out(args.out, args.force, is_dir=False)
    cfg = SynthConfig(subjects=args.subjects, trials=args.trials, segments=args.segments, n_fine=args.n_fine,
                      scheme=args.scheme, separation=args.separation, subject_strength=args.subject_strength,
                      noise=args.noise, n_channels=args.n_channels, n_bands=args.n_bands, sessions=args.sessions, seed=args.seed)
    names = load_montage("builtin").names if args.n_channels == 62 else ()
    ds = synth_generate(cfg, names)
    save_dataset(out, ds)
    _write_manifest(_manifest_path(out), "synth", args, [out], {"synth": asdict(cfg)})
    print(f"wrote\t{out}\tsamples\t{len(ds)}\tchannels\t{ds.n_channels}\tbands\t{ds.n_bands}\tclasses\t{ds.n_fine}")
    return EXIT_OK


def cmd_synth_raw(args) -> int:
    """Band-limited noise recordings whose band powers follow the class templates."""
    out = _prepare_out(args.out, args.force, is_dir=True)
    names = load_montage("builtin").names if args.n_channels == 62 else tuple(f"ch{i}" for i in range(args.n_channels))
    bands = _bands(args)
    cfg = SynthConfig(subjects=args.subjects, trials=args.trials, segments=1, n_fine=args.n_fine,
                      scheme=args.scheme, n_channels=args.n_channels, n_bands=len(bands), seed=args.seed)
    from .datasets import class_templates
    rng = np.random.default_rng(args.seed)
    templates = class_templates(cfg, rng)
    written = []
    for s in range(args.subjects):
        for t in range(args.trials):
            k = trial_label(s, t, args.n_fine)
            power = np.exp(args.separation * templates[k] / 2)
            rec = synth_recording(power, fs=args.fs, seconds=args.seconds, bands=bands, rng=rng,
                                  subject=s, session=0, trial=t, channel_names=names, label=k)
            path = out / f"s{s:02d}_t{t:02d}.bin"
            save_recording(path, rec)
            written.append(path)
    _write_manifest(out / "manifest.json", "synth-raw", args, written)
    print(f"wrote\t{len(written)}\trecordings\tto\t{out}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    if not args.raw:
        raise CliError("featurize needs at least one recording or directory")
    paths: list[Path] = []
    for item in args.raw:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.bin")))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError(f"recording not found: {item}")
    if not paths:
        raise CliError("no recordings found")
    out = _prepare_out(args.out, args.force, is_dir=False)
    kind, bands = normalize_kind(args.feature), _bands(args)
    items, names = [], None
    for path in paths:
        rec = load_recording(path)
        if rec.label is None:
            raise CliError(f"{path} has no label")
        names = names or rec.channel_names
        for mat in featurize(rec, kind, bands, args.window):
            items.append((mat.values, rec.label, rec.subject, rec.session, rec.trial))
    ds = from_feature_matrices(items, args.scheme, kind, bands, names or ())
    save_dataset(out, ds)
    _write_manifest(_manifest_path(out), "featurize", args, [out])
    print(f"wrote\t{out}\tsamples\t{len(ds)}\tchannels\t{ds.n_channels}\tbands\t{ds.n_bands}\tfeature\t{kind}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training_curves

    ds = _load_dataset(args.dataset)
    params = state = None
    if args.resume:
        config, params, header, arrays = load_checkpoint(args.resume)
        state = TrainState.from_arrays(header["extra"].get("train_state", {}), arrays)
    else:
        config = _model_config(args, ds)
    if (config.n_channels, config.n_bands) != (ds.n_channels, ds.n_bands):
        raise CliError(f"checkpoint expects ({config.n_channels}, {config.n_bands}) inputs, dataset has ({ds.n_channels}, {ds.n_bands})")
    out = _prepare_out(args.out, args.force, is_dir=True)
    graph = default_static_graph(ds, args.montage, args.radius)
    params, history, state = train(ds, config, _train_config(args), graph, params=params, state=state)
    meta, arrays = state.to_arrays()
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, config, params, step=state.iteration, extra={"train_state": meta}, extra_arrays=arrays)
    history.write_jsonl(out / "train_log.jsonl")
    figs = [plot_training_curves(history.records, out / "training.png")] if history.records else []
    _write_manifest(out / "manifest.json", "train", args, [ckpt, *figs],
                    {"model": config.to_dict(), "fine_updates": state.fine_updates,
                     "coarse_updates": state.coarse_updates})
    last = history.records[-1] if history.records else {}
    print("epoch\tfine_loss\tcoarse_loss\ttrain_accuracy")
    for r in history.records:
        print(f"{r['epoch']}\t{r['fine_loss']:.6f}\t{r['coarse_loss']:.6f}\t{r['train_accuracy']:.4f}")
    print(f"checkpoint\t{ckpt}\titerations\t{state.iteration}\tfine_updates\t{state.fine_updates}"
          f"\tcoarse_updates\t{state.coarse_updates}\tfinal_accuracy\t{last.get('train_accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_confusion, plot_fold_accuracy, plot_scalp_bars

    ds = _load_dataset(args.dataset)
    plan = split_loso(ds) if args.protocol == "loso" else split_subject_dependent(ds, args.train_trials)
    out = _prepare_out(args.out, args.force, is_dir=True)
    if args.checkpoint:
        config, params, _, _ = load_checkpoint(args.checkpoint)
        graph = default_static_graph(ds, args.montage, args.radius)
        model = Pgcn(config, params, graph)
        models = [model] * len(plan)
        report = evaluate(model, ds, plan)
        if args.maps and config.uses_dynamic:
            test = np.concatenate([f.test for f in plan])
            report.scalp = scalp_map(model, ds.features[test])
    else:
        config = _model_config(args, ds)
        graph = default_static_graph(ds, args.montage, args.radius)
        result = run_protocol(ds, plan, config, _train_config(args), graph, jobs=args.jobs, maps=args.maps)
        report, models = result.report, result.models
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for fold, history in zip(plan, result.logs):
                for rec in history.records:
                    fh.write(json.dumps({"fold": fold.fold_id, **rec}, sort_keys=True) + "\n")

    artifacts = [out / "report.json", out / "confusion.csv", out / "folds.csv"]
    report.write_json(artifacts[0])
    report.write_confusion_csv(artifacts[1])
    with open(artifacts[2], "w", encoding="utf-8") as fh:
        fh.write("fold,held_out_subject,accuracy\n")
        for f, h, a in zip(report.fold_ids, report.held_out, report.fold_accuracies):
            fh.write(f"{f},{'' if h is None else h},{a!r}\n")
    class_names = list(SCHEMES[ds.scheme]) if ds.scheme in SCHEMES else []
    artifacts.append(plot_confusion(report.confusion, out / "confusion.png", class_names))
    artifacts.append(plot_fold_accuracy(report, out / "folds.png"))
    if args.maps:
        if report.scalp is None:
            raise CliError("scalp maps need a dynamic graph (not available for pgcn-s)")
        artifacts.append(out / "scalp.csv")
        report.write_scalp_csv(artifacts[-1])
        artifacts.append(plot_scalp_bars(report.scalp, out / "scalp.png", ds.channel_names))
    if args.embeddings:
        artifacts.append(out / "embeddings.csv")
        test = plan[0].test
        write_embeddings_csv(artifacts[-1], models[0], ds, test)
    _write_manifest(out / "manifest.json", "eval", args, artifacts, {"model": config.to_dict()})

    print("fold\theld_out_subject\taccuracy")
    for f, h, a in zip(report.fold_ids, report.held_out, report.fold_accuracies):
        print(f"{f}\t{'-' if h is None else h}\t{a:.4f}")
    print(f"mean\t\t{report.mean:.4f}\nstd\t\t{report.std:.4f}")
    return EXIT_OK


def gradcheck_config() -> PgcnConfig:
    return PgcnConfig(n_channels=8, n_bands=3, order=3, dyn_dim_coarse=4, static_dim_coarse=4, dyn_dim_fine=6, static_dim_fine=6,
                      n_coarse=3, n_fine=5)


def run_gradcheck(seed: int = 0, eps: float = 1e-5, batch: int = 2, min_margin: float = 1e-4,
                  config: PgcnConfig | None = None) -> dict[str, Any]:
    """Central-difference check of both head losses on a toy model.

    Inputs are redrawn until no ReLU pre-activation lies within ``min_margin``
    of zero, since a step of ``eps`` across a kink breaks the comparison.
    """
    config = config or gradcheck_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    graph = build_static_graph(ring_montage(config.n_channels), 1.1 * 2 * np.pi / config.n_channels)
    for attempt in range(100):
        x = rng.normal(size=(batch, config.n_channels, config.n_bands))
        tape = nk.Tape()
        forward_leaves(config, tape.watch(params), x, graph)
        margin = nk.kink_margin(tape)
        if margin >= min_margin:
            break
    else:
        raise CliError("could not draw inputs away from ReLU kinks", EXIT_NUMERIC)
    yc, yf = rng.integers(0, config.n_coarse, batch), rng.integers(0, config.n_fine, batch)

    def head_loss(which):
        def f(tape, leaves):
            coarse_ce, fine_ce = losses(forward_leaves(config, leaves, x, graph), yc, yf)
            return fine_ce if which == "fine" else coarse_ce
        return f

    results = {}
    for head in config.heads:
        names = [k for k in params if k.startswith(head + ".")]
        results[head] = nk.finite_diff_check(head_loss(head), params, eps=eps, wrt=names)
    return {"max_rel_error": max(results.values()), "per_head": results, "draws": attempt + 1,
            "kink_margin": margin, "eps": eps, "coords": int(sum(params[k].size for k in params))}


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    corrupt = nullcontext()
    if args.corrupt_vjp:
        op, _, factor = args.corrupt_vjp.partition(":")
        corrupt = nk.corrupt_vjp(op, float(factor or 1.5))
    with corrupt:
        res = run_gradcheck(args.seed, args.eps)
    elapsed = time.perf_counter() - started
    ok = res["max_rel_error"] < GRADCHECK_TOL
    print("head\tmax_rel_error")
    for head, err in res["per_head"].items():
        print(f"{head}\t{err:.3e}")
    print(f"overall\t{res['max_rel_error']:.3e}\ttolerance\t{GRADCHECK_TOL:g}\tseconds\t{elapsed:.1f}"
          f"\tresult\t{'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _prepare_out(args.out, args.force, is_dir=False)
        out.write_text(json.dumps({**res, "passed": ok, "seconds": elapsed}, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML (or manifest JSON) file of defaults; flags win")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--seed", type=int, default=0)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="dataset file")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=4, help="coarse head updates every STEPS iterations")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--k-order", type=int, default=5)
    p.add_argument("--dyn-dim", type=int, default=512)
    p.add_argument("--static-dim", type=int, default=256)
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--montage", default="builtin", help="'builtin' or a name,x,y,z CSV")
    p.add_argument("--radius", type=float, default=None, help="static-graph radius in radians")
    p.add_argument("--static-norm", choices=("sym", "row", "none"), default="sym")


def _add_synth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--n-fine", "--p-fine", dest="n_fine", type=int, default=7)
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="mped-like")
    p.add_argument("--separation", type=float, default=0.5)
    p.add_argument("--n-channels", type=int, default=62)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgcn", description="Progressive dual-head graph network for EEG emotion labels.")
    parser.add_argument("--version", action="version", version=f"pgcn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--segments", type=int, default=30)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--subject-strength", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--n-bands", type=int, default=5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("synth-raw", help="generate labelled raw recordings for featurize")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--bands", help="comma list of lo-hi Hz pairs")
    p.set_defaults(func=cmd_synth_raw)

    p = sub.add_parser("featurize", help="turn raw recordings into a feature dataset")
    _add_common(p)
    p.add_argument("raw", nargs="*", help="recording files or directories of *.bin")
    p.add_argument("--feature", default="de", help="de, energy or stft")
    p.add_argument("--bands", help="comma list of lo-hi Hz pairs")
    p.add_argument("--window", type=float, default=1.0, help="segment length in seconds")
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="mped-like")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    _add_common(p)
    _add_model(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation protocol and write reports and figures")
    _add_common(p)
    _add_model(p)
    p.add_argument("--protocol", choices=("subject-dependent", "loso"), default="subject-dependent")
    p.add_argument("--train-trials", type=int, default=7, help="trials per session used for training")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--maps", action="store_true", help="write per-band electrode contribution maps")
    p.add_argument("--embeddings", action="store_true", help="write fold-0 test embeddings")
    p.add_argument("--checkpoint", help="evaluate this trained model on every fold instead of training")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradients")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt-vjp", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        defaults = _load_config_file(args.config)
        sub = parser.commands[args.command]
        known = set(vars(sub.parse_args([] if args.command != "featurize" else [])))
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"pgcn: error: {exc}", file=sys.stderr)
        return exc.code
    except (TrainingDiverged, nk.NonFiniteError) as exc:
        print(f"pgcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, FileNotFoundError, nk.ShapeError) as exc:
        print(f"pgcn: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
