"""Command-line entry point: ``cdrsb <verb> [options]``.

Every verb writes into ``--out`` (default ``$CDRSB_OUT``, else ``./cdrsb_out``)
using fixed file names, listed in ``OUTPUTS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import synth as synth_mod
from .config import VARIANTS, ConfigError, TrainConfig, dump_config, load_config
from .dataset import TRAIN, DatasetError, load_bundle, prepare, save_bundle
from .metrics import EvalResult, evaluate_ranking, evaluate_rating
from .model import Recommender, export_embeddings
from .regulate import alpha_report, write_alpha_report
from .train import TrainingError, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("cdrsb")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_TRAINING = 6

OUTPUTS = {
    "prepare": ["interactions.tsv", "trust.tsv", "bundle.json"],
    "synth": ["ratings.tsv", "trust.tsv", "ground_truth.csv", "synth_config.json",
              "interactions.tsv", "bundle.json"],
    "train": ["model.pt", "train_report.json", "train_epochs.csv", "config.txt"],
    "eval": ["eval.json", "ranking_detail.csv (ranking only)"],
    "ablate": ["ablation.csv", "ablation.json"],
    "export-embeddings": ["graph_embeddings.csv", "disentangled_embeddings.csv"],
    "alpha-report": ["alpha_report.csv", "alpha_report.json"],
}


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("CDRSB_OUT") or "cdrsb_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    return load_config(args.config, args.set or (), seed=args.seed, task=args.task, variant=args.variant)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _bundle(args):
    return load_bundle(_require(args.data))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> None:
    cfg = _config(args)
    bundle = prepare(_require(args.ratings), _require(args.trust) if args.trust else None,
                     min_count=args.min_count, task=cfg.task, seed=cfg.seed, subsample=args.subsample)
    out = _out_dir(args)
    save_bundle(bundle, out)
    print(bundle.summary_json())


def cmd_synth(args) -> None:
    cfg = _config(args)
    overrides = {k: v for k, v in dict(n_users=args.n_users, n_items=args.n_items,
                                      conformity_rate=args.conformity_rate).items() if v is not None}
    scfg = synth_mod.SynthConfig(seed=cfg.seed, **overrides)
    bundle, truth = synth_mod.generate(scfg, task=cfg.task)
    out = _out_dir(args)
    synth_mod.write_corpus(out, bundle, truth, scfg)
    save_bundle(bundle, out)
    print(bundle.summary_json())


def cmd_train(args) -> None:
    cfg = _config(args)
    bundle = _bundle(args)
    if cfg.task != bundle.task:
        raise ConfigError(f"task {cfg.task!r} does not match the bundle's task {bundle.task!r}")
    out = _out_dir(args)
    report, model = fit(bundle, cfg)
    save_checkpoint(out / "model.pt", model)
    report.write(out / "train_report.json", out / "train_epochs.csv")
    (out / "config.txt").write_text(dump_config(cfg))
    print(json.dumps({"best_epoch": report.best_epoch, "stop_epoch": report.stop_epoch,
                      "validation": report.best_validation}, sort_keys=True))


def _evaluate(model, bundle, split: str, detail_path=None) -> EvalResult:
    cfg = model.config
    rec = Recommender(model, bundle)
    if bundle.task == "rating":
        return evaluate_rating(rec, bundle, split)
    return evaluate_ranking(rec, bundle, split, cfg.eval_negatives, cfg.eval_k, seed=cfg.seed,
                            detail_path=detail_path)


def cmd_eval(args) -> None:
    bundle = _bundle(args)
    model = load_checkpoint(_require(args.checkpoint))
    out = _out_dir(args)
    result = _evaluate(model, bundle, args.split, out / "ranking_detail.csv")
    _write_json(out / "eval.json", result.to_dict())
    print(result.to_json())


def ablation_table(bundle, config: TrainConfig, seeds, variants=VARIANTS):
    """Train every variant under every seed; returns ``(rows, runs)``.

    ``rows`` has one entry per variant with the median test metrics over seeds.
    """
    runs = []
    for variant in variants:
        for seed in seeds:
            cfg = config.updated(variant=variant, seed=seed)
            report, model = fit(bundle, cfg)
            result = _evaluate(model, bundle, "test")
            runs.append(dict(variant=variant, seed=seed, best_epoch=report.best_epoch,
                             seconds=report.seconds, **_metric_cols(result)))
            log.info("ablate %s seed=%d %s", variant, seed, _metric_cols(result))
    rows = []
    for variant in variants:
        mine = [r for r in runs if r["variant"] == variant]
        cols = [c for c in mine[0] if c not in ("variant", "seed", "best_epoch", "seconds")]
        rows.append(dict(variant=variant, num_seeds=len(mine),
                         **{c: float(np.median([r[c] for r in mine])) for c in cols}))
    return rows, runs


def _metric_cols(result: EvalResult) -> dict:
    if result.task == "rating":
        return {"rmse": result.rmse, "mae": result.mae}
    return {f"hr@{result.k}": result.hr_at_k, f"ndcg@{result.k}": result.ndcg_at_k}


def write_ablation(out: Path, rows, runs, seeds) -> None:
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "ablation.json", {"seeds": list(seeds), "statistic": "median", "rows": rows,
                                        "runs": runs})


def cmd_ablate(args) -> None:
    cfg = _config(args)
    bundle = _bundle(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one integer")
    rows, runs = ablation_table(bundle, cfg, seeds)
    out = _out_dir(args)
    write_ablation(out, rows, runs, seeds)
    print(json.dumps(rows, indent=2))


def cmd_export(args) -> None:
    bundle = _bundle(args)
    model = load_checkpoint(_require(args.checkpoint))
    out = _out_dir(args)
    export_embeddings(model, bundle, out / "graph_embeddings.csv", out / "disentangled_embeddings.csv")


def cmd_alpha_report(args) -> None:
    bundle = _bundle(args)
    model = load_checkpoint(_require(args.checkpoint))
    users, items, _ = bundle.split_arrays(args.split)
    report = alpha_report(bundle, model.item_interest_table(bundle), list(zip(users.tolist(), items.tolist())),
                          model.config.similarity_threshold)
    out = _out_dir(args)
    write_alpha_report(report, out / "alpha_report.csv", out / "alpha_report.json")
    print(json.dumps(report["summary"], sort_keys=True))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key = value lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", help="output directory (default $CDRSB_OUT or ./cdrsb_out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=["rating", "ranking"])
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrsb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("prepare", help="raw ratings + trust files -> split bundle")
    _common(p)
    p.add_argument("--ratings", required=True)
    p.add_argument("--trust")
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--subsample", type=float)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic corpus and its bundle")
    _common(p)
    p.add_argument("--n-users", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--conformity-rate", type=float)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in [("train", cmd_train, "fit a model on a bundle"),
                                 ("ablate", cmd_ablate, "train all four variants over several seeds")]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True, help="bundle directory")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2,3,4")
        p.set_defaults(func=func)

    for name, func, helptext, split_default in [
            ("eval", cmd_eval, "evaluate a checkpoint", "test"),
            ("export-embeddings", cmd_export, "write embedding CSVs", None),
            ("alpha-report", cmd_alpha_report, "regulation decisions and counts", TRAIN)]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True, help="bundle directory")
        p.add_argument("--checkpoint", required=True)
        if split_default:
            p.add_argument("--split", default=split_default, choices=["train", "validation", "test"])
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
