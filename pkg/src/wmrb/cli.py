"""
Command-line interface: ``wmrb train | evaluate | simulate | popularity``.

Artifacts (JSON or CSV) go to ``--out`` or stdout; progress and errors go
to stderr.  Exit codes: 0 ok, 1 bad configuration, 2 bad data or model
file, 3 diverged training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import (
    DataError,
    identity_features,
    load_features,
    load_interactions,
    load_manifest,
    popularity_counts,
    popularity_ranking,
    split_interactions,
)
from .estimator_lab import DEFAULT_N, DEFAULT_Q, default_p_grid, simulate_estimators
from .evaluation import EmptyEvaluationError, ModelScorer, PopularityScorer, evaluate
from .model import ConfigError, ModelFormatError, load_model, save_model
from .trainer import LOSSES, DivergedTrainingError, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_log = logging.getLogger("wmrb")

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = ("manifest", "model", "out")
_CONFIG_KEYS = _TRAIN_FIELDS | set(_PATH_KEYS) | {"k_list"}

# flag dest -> config key, for flags that override the run config
_OVERRIDES = {
    "manifest": "manifest",
    "model": "model",
    "out": "out",
    "loss": "loss",
    "dim": "dim",
    "epochs": "epochs",
    "lr": "learning_rate",
    "l2": "l2",
    "batch_size": "batch_size",
    "candidates": "candidate_count",
    "seed": "seed",
    "threads": "threads",
    "max_trials": "max_trials",
    "backend": "backend",
    "k": "k_list",
}


def load_run_config(path) -> dict:
    """Read a JSON run config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for key in _PATH_KEYS:
        if raw.get(key) is not None:
            raw[key] = str((path.parent / raw[key]).resolve())
    return raw


def _run_config(args) -> dict:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[key] = value
    for key in _PATH_KEYS:
        if cfg.get(key) is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg.items() if k in _TRAIN_FIELDS}
    try:
        return TrainConfig(**fields)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _load_data(cfg: dict):
    if not cfg.get("manifest"):
        raise ConfigError("a dataset manifest is required (--manifest or config 'manifest')")
    manifest = load_manifest(cfg["manifest"])
    dataset = load_interactions(manifest.interactions, manifest)
    dataset = split_interactions(dataset, manifest.test_fraction, manifest.seed)
    if manifest.user_features is not None:
        uf = load_features(manifest.user_features, dataset.num_users, manifest.identity_features)
    else:
        uf = identity_features(dataset.num_users)
    if manifest.item_features is not None:
        itf = load_features(manifest.item_features, dataset.num_items, manifest.identity_features)
    else:
        itf = identity_features(dataset.num_items)
    _log.info(
        "%d users, %d items, %d train / %d test interactions",
        dataset.num_users, dataset.num_items, dataset.num_train, dataset.num_test,
    )
    return dataset, uf, itf


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def cmd_train(args) -> int:
    cfg = _run_config(args)
    config = _train_config(cfg)
    config.validate()
    if not cfg.get("model"):
        raise ConfigError("an output model path is required (--model)")
    dataset, uf, itf = _load_data(cfg)
    params, report = train(dataset, config, uf, itf)
    save_model(params, cfg["model"])
    _log.info("model written to %s", cfg["model"])
    _emit(report.to_json(indent=2) + "\n", cfg.get("out"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    k_list = cfg.get("k_list", [5, 30])
    if isinstance(k_list, int):
        k_list = [k_list]
    if not k_list or any(int(k) < 1 for k in k_list):
        raise ConfigError("k values must be >= 1")
    if args.baseline is None and not cfg.get("model"):
        raise ConfigError("pass --model or --baseline pop")
    dataset, uf, itf = _load_data(cfg)
    if args.baseline == "pop":
        scorer = PopularityScorer(dataset)
    else:
        scorer = ModelScorer(load_model(cfg["model"]), uf, itf)
    report = evaluate(scorer, dataset, k_list)
    _emit(report.to_json(percent=args.percent, indent=2) + "\n", cfg.get("out"))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        p_grid = default_p_grid(args.item_set_size, args.points, args.p_min, args.p_max)
        stats = simulate_estimators(
            N=args.item_set_size,
            p_grid=p_grid,
            q_list=args.q,
            trials=args.trials,
            seed=args.seed,
            max_trials=args.max_trials,
            estimator="hinge" if args.hinge else "indicator",
            threads=args.threads,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    _emit(stats.to_csv(), args.out)
    return EXIT_OK


def cmd_popularity(args) -> int:
    cfg = _run_config(args)
    dataset, _, _ = _load_data(cfg)
    ranking = popularity_ranking(dataset)
    if args.top is not None:
        ranking = ranking[: args.top]
    counts = popularity_counts(dataset)
    doc = {"items": ranking.tolist(), "counts": counts[ranking].tolist()}
    _emit(json.dumps(doc) + "\n", cfg.get("out"))
    return EXIT_OK


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmrb", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--manifest", help="dataset manifest (JSON)")
        p.add_argument("--out", help="write the artifact here instead of stdout")

    p = sub.add_parser("train", help="fit a model and write it with a training report")
    data_args(p)
    p.add_argument("--model", help="where to write the model file")
    p.add_argument("--loss", help=f"one of: {', '.join(LOSSES)}")
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--candidates", type=int, help="candidate set size |Z| for batch losses")
    p.add_argument("--max-trials", type=int, help="WARP sampling cap")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--backend", help="kernel backend: python or cython")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="top-k metrics on the held-out split")
    data_args(p)
    p.add_argument("--model", help="trained model file")
    p.add_argument("--baseline", choices=["pop"], help="evaluate a baseline instead of a model")
    p.add_argument("--k", type=_positive_int, nargs="+")
    p.add_argument("--percent", action="store_true", help="report metrics in percent")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="online vs sampled-batch rank estimator statistics (CSV)")
    p.add_argument("--item-set-size", type=int, default=DEFAULT_N)
    p.add_argument("--q", type=float, nargs="+", default=list(DEFAULT_Q))
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo runs per grid point")
    p.add_argument("--points", type=int, default=30)
    p.add_argument("--p-min", type=float, default=1e-5)
    p.add_argument("--p-max", type=float, default=0.5)
    p.add_argument("--max-trials", type=int)
    p.add_argument("--hinge", action="store_true", help="use hinge magnitudes in the batch estimator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("popularity", help="items ranked by training interaction count")
    data_args(p)
    p.add_argument("--top", type=_positive_int)
    p.set_defaults(func=cmd_popularity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError, EmptyEvaluationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergedTrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
