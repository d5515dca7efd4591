"""Command-line entry point: ``spectral-adapt {spectra,train,sweep,analyze,synth}``.

Exit codes: 0 ok, 1 usage, 2 data, 3 numerical/solver, 4 non-finite training.
Every JSON output embeds a run manifest; rerunning a command with the same
inputs and seed reproduces the output byte for byte except the manifest's
``wall_clock`` field.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .adaptation import AdaptKind
from .datasets import DatasetError, generate_splits, load_dataset, load_splits, save_dataset, \
    save_splits, synth_heterophily
from .graph import GraphError, homophily_score, sym_normalize
from .model import DISPLAY_NAMES, ModelConfig, NonFiniteError, Variant, load_checkpoint, \
    prepare_inputs, save_checkpoint
from .spectral import SpectralError, cached_feature_spectrum, cached_spectrum
from .training import TrainConfig, default_space, format_mean_std, mean_std, run_cells, \
    split_seed, sweep

logger = logging.getLogger("spectral_adapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER, EXIT_NONFINITE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, NaN/inf as null."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.iterdir() if p.is_file()):
            h.update(child.name.encode() + b"\0")
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def make_manifest(args, config: dict, started: float) -> dict:
    inputs = {}
    for attr in ("data", "splits", "checkpoint", "table", "homophily"):
        value = getattr(args, attr, None)
        if value:
            inputs[attr] = _hash_path(Path(value))
    return {
        "command": args.command + (f" {args.study}" if getattr(args, "study", None) else ""),
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "version": __version__,
        "wall_clock": {"started": started, "seconds": time.time() - started},
    }


def _emit(args, payload: dict, lines):
    text = dumps(payload)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        for line in lines:
            print(line)
    else:
        sys.stdout.write(text)
        for line in lines:
            print(line, file=sys.stderr)


# ---------------------------------------------------------------------------
# shared setup

def _load(args):
    bundle = load_dataset(args.data)
    if getattr(args, "splits", None):
        splits = load_splits(args.splits, bundle.n)
    else:
        splits = generate_splits(bundle.n, seed=args.split_seed, count=args.num_splits)
    return bundle, splits


def _model_config(args, n: int, m: int) -> ModelConfig:
    variant = Variant(args.model)
    if args.d is not None and args.d < 1:
        raise UsageError("--d must be >= 1")
    if args.d is not None and args.d > n:
        raise UsageError(f"--d {args.d} exceeds the node count {n}")
    hidden = args.hidden
    if variant is Variant.LR:
        hidden = 0
    adapt = args.adapt if variant not in (Variant.LR, Variant.MLP) else AdaptKind.FROZEN
    try:
        cfg = ModelConfig(variant=variant, d=args.d, k=args.k, hidden=hidden,
                          dropout=args.dropout, scale=args.scale, use_order0=args.order0,
                          adapt=adapt, bins=args.bins, feature_scaling=args.feature_scaling)
        if variant is Variant.REGEIGEN and args.bins is None:
            d = cfg.d if cfg.d is not None else min(n, 2048)
            cfg = replace(cfg, bins=max(1, d // 2))
            logger.warning("regeigen without --bins: using %d bins (50%% of d=%d)", cfg.bins, d)
        return cfg.resolve(n, m)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, l1_lambda=args.l1,
                           max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _spectra_for(bundle, cfg: ModelConfig, d: int | None = None):
    """Basis and feature spectrum needed by ``cfg``; cache hits are reported on stderr."""
    cache = {}
    basis = featspec = None
    if cfg.uses_graph:
        basis, cache["basis"] = cached_spectrum(sym_normalize(bundle.graph), d or cfg.d)
    if cfg.uses_feature_spectrum:
        featspec, cache["features"] = cached_feature_spectrum(bundle.features, cfg.k)
    for key, hit in cache.items():
        print(f"cache {key}: {'hit' if hit else 'miss'}", file=sys.stderr)
    return basis, featspec


def _inputs_factory(bundle, basis, featspec):
    memo = {}

    def inputs_for(cfg):
        key = (cfg.d, cfg.k, cfg.feature_scaling, cfg.variant, cfg.use_order0)
        if key not in memo:
            memo[key] = prepare_inputs(cfg, bundle.features, basis, featspec)
        return memo[key]

    return inputs_for


# ---------------------------------------------------------------------------
# commands

def cmd_spectra(args, started):
    if args.d is not None and args.d < 1:
        raise UsageError("--d must be >= 1")
    bundle = load_dataset(args.data)
    n, m = bundle.n, bundle.features.shape[1]
    d = args.d if args.d is not None else min(n, 2048)
    if d > n:
        raise UsageError(f"--d {d} exceeds the node count {n}")
    k = args.k if args.k is not None else min(m, n, 2048)
    basis, hit_b = cached_spectrum(sym_normalize(bundle.graph), d)
    featspec, hit_f = cached_feature_spectrum(bundle.features, k)
    config = {"d": d, "k": k}
    payload = {
        "manifest": make_manifest(args, config, started),
        "dataset": bundle.stats(),
        "d": d,
        "k": k,
        "sigma": basis.sigma,
        "sigma_x": featspec.sigma_x,
        "rank_deficient": featspec.rank_deficient,
    }
    lines = [
        f"{bundle.name}: n={n} d={d} k={k}",
        f"sigma: max={basis.sigma[0]:.6f} min={basis.sigma[-1]:.6f} "
        f"median={float(np.median(basis.sigma)):.6f}",
        f"cache: basis {'hit' if hit_b else 'miss'}, features {'hit' if hit_f else 'miss'}",
    ]
    _emit(args, payload, lines)


def _train_payload(reports):
    tests = [r.test_acc for r in reports]
    mean, std = mean_std(tests)
    return {"splits": [r.to_dict() for r in reports], "mean_test_acc": mean,
            "std_test_acc": std, "summary": format_mean_std(tests)}


def cmd_train(args, started):
    bundle, splits = _load(args)
    cfg = _model_config(args, bundle.n, bundle.features.shape[1])
    tcfg = _train_config(args)
    basis, featspec = _spectra_for(bundle, cfg)
    inputs = prepare_inputs(cfg, bundle.features, basis, featspec)
    specs = [(s, cfg, replace(tcfg, seed=split_seed(args.seed, 0, s)), inputs,
              bundle.labels, bundle.num_classes, split) for s, split in enumerate(splits)]
    results = run_cells(specs, args.jobs)
    reports = [results[s] for s in range(len(splits))]
    if args.checkpoint_dir:
        out = Path(args.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, r in enumerate(reports):
            save_checkpoint(out / f"split{s}.ckpt", cfg, r.params)
    config = {"model": cfg.to_dict(), "train": tcfg.to_dict(), "num_splits": len(splits)}
    payload = {"manifest": make_manifest(args, config, started), "dataset": bundle.stats(),
               **_train_payload(reports)}
    name = DISPLAY_NAMES[cfg.variant]
    _emit(args, payload, [f"{bundle.name}\t{name}\t{payload['summary']}"])


def cmd_sweep(args, started):
    bundle, splits = _load(args)
    cfg = _model_config(args, bundle.n, bundle.features.shape[1])
    tcfg = _train_config(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    space = default_space(cfg.variant, cfg.d, bundle.n)
    if args.space:
        try:
            space.update(json.loads(Path(args.space).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--space: {exc}") from None
    basis, featspec = _spectra_for(bundle, cfg)
    result = sweep(cfg, tcfg, space, _inputs_factory(bundle, basis, featspec), bundle.labels,
                   bundle.num_classes, splits, args.trials, args.seed, args.jobs)
    config = {"model": cfg.to_dict(), "train": tcfg.to_dict(), "space": space,
              "trials": args.trials, "num_splits": len(splits)}
    payload = {"manifest": make_manifest(args, config, started), "dataset": bundle.stats(),
               **result.to_dict()}
    name = DISPLAY_NAMES[cfg.variant]
    _emit(args, payload, [f"{bundle.name}\t{name}\t{result.summary}",
                          f"best: {json.dumps(_jsonable(result.best_point), sort_keys=True)}"])


def _parse_list(text, kind):
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_analyze(args, started):
    study = args.study
    if study == "rank":
        table = json.loads(Path(args.table).read_text())
        groups = json.loads(Path(args.homophily).read_text()) if args.homophily else None
        try:
            result = analysis.rank_models(table, groups, args.threshold)
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"rank table: {exc}") from None
        payload = {"manifest": make_manifest(args, {"threshold": args.threshold}, started),
                   **result}
        lines = [f"{m}\t" + "\t".join(f"{g}={r:.2f}" for g, r in ranks.items())
                 for m, ranks in result["average_rank"].items()]
        _emit(args, payload, lines)
        return

    if study == "ratio":
        cfg, params = load_checkpoint(args.checkpoint)
        bundle = load_dataset(args.data)
        if cfg.d is None or cfg.d > bundle.n:
            raise DatasetError("checkpoint does not match the dataset")
        basis, _ = cached_spectrum(sym_normalize(bundle.graph), cfg.d)
        series = analysis.eig_ratio(params.adaptation, basis.sigma, args.window)
        payload = {"manifest": make_manifest(args, {"window": args.window, "model": cfg.to_dict()},
                                             started),
                   **series.to_plot_data()}
        _emit(args, payload, [f"ratio: {series.raw.size} entries, "
                              f"{series.omitted.size} omitted, window {series.window}"])
        return

    bundle, splits = _load(args)
    if study == "weights":
        if not 0 <= args.split_index < len(splits):
            raise UsageError(f"--split-index out of range [0, {len(splits)})")
        d = args.d if args.d is not None else min(bundle.n, 2048)
        if not 1 <= d <= bundle.n:
            raise UsageError(f"--d must lie in [1, {bundle.n}]")
        basis, _ = cached_spectrum(sym_normalize(bundle.graph), d)
        res = analysis.eigenweight_probe(basis, bundle.labels, splits[args.split_index],
                                         bundle.num_classes)
        payload = {"manifest": make_manifest(args, {"d": d, "split_index": args.split_index},
                                             started),
                   **res.to_plot_data(), "val_acc": res.val_acc, "test_acc": res.test_acc}
        _emit(args, payload, [f"probe: val {res.val_acc:.4f} test {res.test_acc:.4f}"])
        return

    cfg = _model_config(args, bundle.n, bundle.features.shape[1])
    tcfg = _train_config(args)
    space = {}
    if args.trials > 1:
        space = default_space(cfg.variant, cfg.d, bundle.n)
        space.pop("bins", None)
    if study == "components":
        d_list = _parse_list(args.d_list, int)
        if not d_list or min(d_list) < 1 or max(d_list) > bundle.n:
            raise UsageError(f"--d-list entries must lie in [1, {bundle.n}]")
        cfg = replace(cfg, d=max(d_list))
        basis, featspec = _spectra_for(bundle, cfg)
        result = analysis.vary_components_study(
            bundle, splits, d_list, cfg, tcfg, _inputs_factory(bundle, basis, featspec),
            space, args.trials, args.seed, args.jobs)
    else:
        fractions = _parse_list(args.fractions, float)
        if not fractions or min(fractions) <= 0 or max(fractions) > 1:
            raise UsageError("--fractions entries must lie in (0, 1]")
        basis, featspec = _spectra_for(bundle, cfg)
        result = analysis.vary_labels_study(
            bundle, splits, fractions, cfg, tcfg, _inputs_factory(bundle, basis, featspec),
            space, args.trials, args.seed, args.jobs)
    config = {"model": cfg.to_dict(), "train": tcfg.to_dict(), "trials": args.trials}
    payload = {"manifest": make_manifest(args, config, started), **result}
    lines = [f"{x}\t{100 * mu:.2f} ({100 * sd:.2f})"
             for x, mu, sd in zip(result["x"], result["mean"], result["std"])]
    _emit(args, payload, lines)


def cmd_synth(args, started):
    bundle = synth_heterophily(args.n, args.classes, args.p_intra, args.p_inter, args.noise,
                               args.seed, args.features, args.informative, args.name)
    out = Path(args.out)
    save_dataset(bundle, out, binary_features=args.binary)
    save_splits(generate_splits(bundle.n, seed=args.seed, count=args.num_splits),
                out / "splits.json")
    print(f"wrote {out}: n={bundle.n} edges={bundle.graph.num_edges} "
          f"homophily={homophily_score(bundle.labeled):.4f}")


# ---------------------------------------------------------------------------
# parser

def _add_data(p, splits=True):
    p.add_argument("--data", required=True, help="dataset directory")
    if splits:
        p.add_argument("--splits", help="splits.json; default: generated 48/32/20 splits")
        p.add_argument("--num-splits", type=int, default=10)
        p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", help="output JSON path (default: stdout)")


def _add_model(p):
    p.add_argument("--model", choices=[v.value for v in Variant], default="eigen-eigen")
    p.add_argument("--adapt", choices=[k.value for k in AdaptKind], default="c2")
    p.add_argument("--bins", type=int)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--order0", action="store_true", help="append reduced raw features")
    p.add_argument("--d", type=int, help="graph components (default min(n, 2048))")
    p.add_argument("--k", type=int, help="feature components (default min(m, n, 2048))")
    p.add_argument("--feature-scaling", choices=["sqrt", "eig"], default="sqrt")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--l1", type=float, default=0.0, help="L1 strength on adaptation scales")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spectral-adapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spectra", help="compute and cache the truncated spectra")
    _add_data(p, splits=False)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)

    p = sub.add_parser("train", help="fit one configuration on every split")
    _add_data(p)
    _add_model(p)
    p.add_argument("--checkpoint-dir", help="write split<i>.ckpt files here")

    p = sub.add_parser("sweep", help="random hyperparameter search")
    _add_data(p)
    _add_model(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--space", help="JSON file overriding grid entries")

    p = sub.add_parser("analyze", help="diagnostic studies")
    studies = p.add_subparsers(dest="study", required=True, parser_class=_Parser)
    s = studies.add_parser("weights", help="eigenvector weight probe")
    _add_data(s)
    s.add_argument("--d", type=int)
    s.add_argument("--split-index", type=int, default=0)
    s = studies.add_parser("ratio", help="adapted / original eigenvalue ratios")
    _add_data(s, splits=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--window", type=int, default=100)
    s = studies.add_parser("components", help="accuracy versus component count")
    _add_data(s)
    _add_model(s)
    s.add_argument("--d-list", required=True, help="comma-separated component counts")
    s.add_argument("--trials", type=int, default=1)
    s = studies.add_parser("labels", help="accuracy versus labeled fraction")
    _add_data(s)
    _add_model(s)
    s.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--trials", type=int, default=1)
    s = studies.add_parser("rank", help="average model ranks per dataset group")
    s.add_argument("--table", required=True, help="JSON {model: {dataset: accuracy}}")
    s.add_argument("--homophily", help="JSON {dataset: homophily score or group name}")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")

    p = sub.add_parser("synth", help="write a planted-partition dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--p-intra", type=float, default=0.01)
    p.add_argument("--p-inter", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--informative", action="store_true")
    p.add_argument("--binary", action="store_true", help="write features.bin")
    p.add_argument("--num-splits", type=int, default=10)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"spectra": cmd_spectra, "train": cmd_train, "sweep": cmd_sweep,
            "analyze": cmd_analyze, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        COMMANDS[args.command](args, started)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GraphError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SpectralError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except NonFiniteError as exc:
        print(f"non-finite training: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
