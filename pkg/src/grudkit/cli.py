"""Command-line interface: generate, train, evaluate, impute, project.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .cells import NumericError, load_checkpoint, save_checkpoint
from .dataset import DatasetError, EpisodeSet, SplitSpec, load_episodes, save_episodes, split, standardize
from .evaluation import aggregate_restarts, format_table, pca_last_states, write_xy_csv
from .experiment import check_pairing, evaluate_model, model_label, project_states, run_restart, summarize
from .imputation import ImputationKind, ImputationMethod, impute_episodes
from .synthgen import SynthConfig, describe, generate
from .training import ConfigError, TrainConfig

log = logging.getLogger("grudkit")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n")


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    try:
        cfg = SynthConfig(
            n_series=args.n,
            t_len=args.t_len,
            n_vars=args.n_vars,
            class_balance=args.class_balance,
            base_missing_rate=args.missing_rate,
            informative_missing_boost=args.boost,
            signal_shift=args.signal_shift,
            onset_day=args.onset_day,
            noise_std=args.noise_std,
            ar_coef=args.ar_coef,
            signal_vars=args.signal_vars,
            informative_vars=args.informative_vars,
            seed=args.seed,
        )
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    episodes = generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_episodes(episodes, out)
    _write_json(out.with_name(out.name + ".config.json"), {"command": "generate", **cfg.to_dict()})
    if args.describe:
        print(json.dumps(describe(episodes, cfg.onset_day), indent=1))
    log.info("wrote %d episodes to %s", len(episodes), out)
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        hidden_size=args.hidden,
        dropout_rate=args.dropout,
        lam=args.lam,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        reg=args.reg,
    )


def _split_spec(args) -> SplitSpec:
    return SplitSpec(args.val_fraction, args.train_fraction, args.split_seed, args.split_mode)


def _restart_job(payload):
    episodes, cell, impute, config, spec, restart, scale = payload
    return run_restart(episodes, cell, impute, config, spec, restart, scale)


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_f1", "val_auc"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_f1), repr(rec.val_auc)])


def cmd_train(args) -> int:
    if args.data is None or args.cell is None:
        raise UsageError("train needs a dataset path and --cell")
    if args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    check_pairing(args.cell, args.impute)
    episodes = load_episodes(args.data)
    config = _train_config(args)
    spec = _split_spec(args)
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(args)
    _write_json(out / "config.json", resolved)

    jobs = [(episodes, args.cell, args.impute, config, spec, k, not args.no_standardize) for k in range(args.restarts)]
    if args.jobs > 1 and args.restarts > 1:
        with ProcessPoolExecutor(min(args.jobs, args.restarts)) as pool:
            results = list(pool.map(_restart_job, jobs))
    else:
        results = [_restart_job(j) for j in jobs]

    for res in results:
        rdir = out / f"restart_{res.restart}"
        rdir.mkdir(exist_ok=True)
        _write_history(rdir / "history.csv", res.fit.history)
        stats = res.splits.train.standardization_stats
        save_checkpoint(
            rdir / "checkpoint.json",
            res.fit.params,
            t_len=episodes.t_len,
            variables=list(episodes.variable_names),
            best_val_f1=res.fit.best_f1,
            best_epoch=res.fit.best_epoch,
            imputation=None
            if res.splits.imputation is None
            else {"kind": res.splits.imputation.kind.value, "fallback_means": res.splits.imputation.fallback_means},
            standardize=not args.no_standardize,
            standardization_stats={"mean": stats[0], "std": stats[1]},
            split={**asdict(spec), "seed": res.split_seed},
            seeds={"base": args.seed, "restart": res.restart, "init": res.seed, "split": res.split_seed},
            train_config=asdict(TrainConfig(**{**asdict(config), "seed": res.seed})),
            dataset=str(args.data),
        )
        _write_json(rdir / "config.json", {**resolved, "restart": res.restart, "init_seed": res.seed, "split_seed": res.split_seed})
        (rdir / "val_report.json").write_text(res.val.to_json())
        (rdir / "test_report.json").write_text(res.test.to_json())

    label = model_label(args.cell, args.impute)
    summary = summarize(results)
    _write_json(out / "summary.json", {"model": label, "restarts": len(results), "summary": summary})
    if len(results) > 1:
        table = format_table({label: summary}, ("val_auc", "val_f1", "test_auc", "test_f1"))
    else:
        table = "  ".join(f"{k}={m:.4f}" for k, (m, _) in summary.items()) + "\n"
    (out / "table.txt").write_text(table)
    sys.stdout.write(table)
    return 0


# --------------------------------------------------------------------------
# evaluate / project
# --------------------------------------------------------------------------


def _episodes_for(ckpt_meta: dict, episodes: EpisodeSet, which: str):
    """Re-create the checkpoint's preprocessing on the requested split."""
    if episodes.n_vars != len(ckpt_meta["variables"]) or episodes.t_len != ckpt_meta["t_len"]:
        raise DatasetError(
            f"dataset shape (T={episodes.t_len}, V={episodes.n_vars}) does not match "
            f"checkpoint shape (T={ckpt_meta['t_len']}, V={len(ckpt_meta['variables'])})"
        )
    if which == "all":
        part = episodes
    else:
        s = ckpt_meta["split"]
        parts = split(episodes, SplitSpec(s["validation_fraction"], s["train_fraction_of_remainder"], s["seed"], s["mode"]))
        part = {"train": parts[0], "val": parts[1], "test": parts[2]}[which]
    if ckpt_meta.get("standardize", True):
        st = ckpt_meta["standardization_stats"]
        part = standardize(part, (np.asarray(st["mean"]), np.asarray(st["std"])))
    imp = ckpt_meta.get("imputation")
    method = None if imp is None else ImputationMethod(ImputationKind(imp["kind"]), np.asarray(imp["fallback_means"]))
    return part, method


def cmd_evaluate(args) -> int:
    if not args.checkpoints or args.data is None:
        raise UsageError("evaluate needs checkpoint path(s) and --data")
    episodes = load_episodes(args.data)
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", _resolved(args))
    reports = []
    for i, path in enumerate(args.checkpoints):
        params, meta = load_checkpoint(path)
        part, method = _episodes_for(meta, episodes, args.split)
        report, states = evaluate_model(
            params, part, method, meta.get("train_config", {}).get("threshold", 0.5), checkpoint=str(path), split=args.split
        )
        sub = out if len(args.checkpoints) == 1 else out / f"model_{i}"
        sub.mkdir(exist_ok=True)
        (sub / "report.json").write_text(report.to_json())
        fpr, tpr = zip(*report.roc_points)
        write_xy_csv(sub / "roc.csv", fpr, tpr)
        proj = pca_last_states(states, part.labels)
        write_xy_csv(sub / "pca.csv", proj.coordinates[:, 0], proj.coordinates[:, 1], proj.labels)
        reports.append(report)
        label = model_label(params.kind, None if method is None else method.kind.value)
    if len(reports) > 1:
        summary = aggregate_restarts(reports)
        table = format_table({label: summary}, ("auc", "f1"))
        _write_json(out / "summary.json", {"model": label, "split": args.split, "summary": summary})
    else:
        r = reports[0]
        table = f"{label}  auc={r.auc:.4f}  f1={r.f1:.4f}  confusion={r.confusion}\n"
    (out / "table.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_project(args) -> int:
    if args.checkpoint is None or args.data is None or args.out is None:
        raise UsageError("project needs a checkpoint, --data and --out")
    params, meta = load_checkpoint(args.checkpoint)
    part, method = _episodes_for(meta, load_episodes(args.data), args.split)
    proj = project_states(params, part, method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_xy_csv(out, proj.coordinates[:, 0], proj.coordinates[:, 1], proj.labels)
    _write_json(
        out.with_name(out.name + ".json"),
        {"explained_variance": proj.explained_variance, "components": proj.components, **_resolved(args)},
    )
    return 0


# --------------------------------------------------------------------------
# impute
# --------------------------------------------------------------------------


def cmd_impute(args) -> int:
    if args.data is None or args.method is None or args.out is None:
        raise UsageError("impute needs a dataset path, --method and --out")
    episodes = load_episodes(args.data)
    method = ImputationMethod.from_training(args.method, episodes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_episodes(impute_episodes(episodes, method), out)
    _write_json(out.with_name(out.name + ".config.json"), {**_resolved(args), "fallback_means": method.fallback_means})
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="base seed for all randomness")
    p.add_argument("--out", default=None, help="output path (file or directory)")
    p.add_argument("--config", default=None, help="JSON file of defaults; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="grudkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _common(g)
    g.add_argument("--n", type=int, default=800)
    g.add_argument("--t-len", type=int, default=20)
    g.add_argument("--n-vars", type=int, default=10)
    g.add_argument("--class-balance", type=float, default=SynthConfig.class_balance)
    g.add_argument("--missing-rate", type=float, default=SynthConfig.base_missing_rate)
    g.add_argument("--boost", type=float, default=SynthConfig.informative_missing_boost)
    g.add_argument("--signal-shift", type=float, default=SynthConfig.signal_shift)
    g.add_argument("--onset-day", type=int, default=SynthConfig.onset_day)
    g.add_argument("--noise-std", type=float, default=SynthConfig.noise_std)
    g.add_argument("--ar-coef", type=float, default=SynthConfig.ar_coef)
    g.add_argument("--signal-vars", type=int, nargs="*", default=list(SynthConfig.signal_vars))
    g.add_argument("--informative-vars", type=int, nargs="*", default=list(SynthConfig.informative_vars))
    g.add_argument("--describe", action="store_true", help="print per-class missingness summary")
    g.set_defaults(func=cmd_generate)
    subs["generate"] = g

    t = sub.add_parser("train", help="train one cell type, optionally over several restarts")
    _common(t)
    t.add_argument("data", nargs="?")
    t.add_argument("--cell", choices=["ernn", "gru", "grud"])
    t.add_argument("--impute", choices=[k.value for k in ImputationKind])
    t.add_argument("--restarts", type=int, default=10)
    t.add_argument("--jobs", type=int, default=1, help="parallel restarts")
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--hidden", type=int, default=TrainConfig.hidden_size)
    t.add_argument("--dropout", type=float, default=TrainConfig.dropout_rate)
    t.add_argument("--lam", type=float, default=TrainConfig.lam)
    t.add_argument("--reg", choices=["sumsq", "norm"], default=TrainConfig.reg)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--train-fraction", type=float, default=0.6)
    t.add_argument("--split-mode", choices=["remainder", "total"], default="remainder")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--no-standardize", action="store_true")
    t.set_defaults(func=cmd_train)
    subs["train"] = t

    e = sub.add_parser("evaluate", help="score checkpoint(s) on a split")
    _common(e)
    e.add_argument("checkpoints", nargs="*")
    e.add_argument("--data")
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.set_defaults(func=cmd_evaluate)
    subs["evaluate"] = e

    i = sub.add_parser("impute", help="write an imputed copy of a dataset")
    _common(i)
    i.add_argument("data", nargs="?")
    i.add_argument("--method", choices=[k.value for k in ImputationKind])
    i.set_defaults(func=cmd_impute)
    subs["impute"] = i

    pj = sub.add_parser("project", help="2-D PCA of final hidden states")
    _common(pj)
    pj.add_argument("checkpoint", nargs="?")
    pj.add_argument("--data")
    pj.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    pj.set_defaults(func=cmd_project)
    subs["project"] = pj
    return parser, subs


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and argv and argv[0] in subs:
        try:
            defaults = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        subs[argv[0]].set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"grudkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError) as exc:
        print(f"grudkit {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"grudkit {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
