"""Command-line interface: suite generation, pooling, selection, mixing,
grid search, full runs, and report emission.

Exit codes: 0 on success, 2 for validation problems (bad arguments,
precondition violations, refusing to overwrite without --force), 3 for
runtime failures. The RECYCLE_POOL environment variable, when set,
overrides any --pool argument.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, tasks
from .autodiff import ShapeError
from .blackbox import BLACKBOX_TARGET, build_blackbox_model, pool_feature_api
from .eft import EftConfig
from .mixing import train_mixed
from .selection import SelectionConfig, select_top_m
from .sources import Backbone, BackboneConfig, DivergenceError, load_pool
from .tasks import TrainConfig


class ValidationFailure(ValueError):
    pass


def _pool_dir(args) -> str:
    env = os.environ.get("RECYCLE_POOL")
    if env:
        return env
    if not getattr(args, "pool", None):
        raise ValidationFailure("no pool given: pass --pool or set RECYCLE_POOL")
    return args.pool


def _refuse_overwrite(path, force: bool, probe: str | None = None) -> None:
    """Idempotence guard: an existing output is only replaced under --force."""
    p = Path(path)
    target = p / probe if probe else p
    if target.exists() and not force:
        raise ValidationFailure(f"output {p} exists; pass --force to overwrite")


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok != ""]


def _e_list(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in ("full", "none", ""):
            out.append(None)
        else:
            out.append(int(tok))
    return out or [None]


def _train_cfg(args) -> TrainConfig:
    cfg = TrainConfig()
    for name in ("lr", "weight_decay", "epochs", "batch_size", "sigma", "seed",
                 "lambda_new", "theta_init"):
        if getattr(args, name, None) is not None:
            cfg = replace(cfg, **{name: getattr(args, name)})
    return cfg


def cmd_gen_tasks(args) -> int:
    _refuse_overwrite(args.out, args.force, probe="suite_manifest.json")
    if args.kind == "family":
        suite = tasks.gen_family_suite(
            n_families=args.families, tasks_per_family=args.tasks_per_family,
            seed=args.seed, classes_per_task=args.classes_per_task,
            clusters_per_family=args.clusters_per_family,
            n_train=args.train_per_class, n_val=args.val_per_class,
            n_test=args.test_per_class)
    else:
        suite = tasks.gen_overlap_suite(
            n_tasks=args.n_tasks, classes_per_task=args.classes_per_task,
            seed=args.seed, samples_per_class=args.samples_per_class)
    tasks.save_suite(args.out, suite)
    print(f"wrote {len(suite.tasks)} {suite.kind} tasks to {args.out}")
    return 0


def cmd_build_pool(args) -> int:
    out = os.environ.get("RECYCLE_POOL") or args.out
    _refuse_overwrite(out, args.force, probe="manifest.json")
    suite = tasks.load_suite(args.suite)
    wanted = set(args.tasks.split(",")) if args.tasks else None
    selected = [t for t in suite.tasks if wanted is None or t.task_id in wanted]
    if not selected:
        raise ValidationFailure("no tasks selected for the pool")
    backbone = Backbone.create(BackboneConfig(), seed=args.seed)
    pool = harness.build_pool_from_tasks(out, selected, backbone, EftConfig(),
                                         _train_cfg(args))
    print(f"pool at {pool.root} holds {len(pool.records)} models")
    return 0


def cmd_select(args) -> int:
    _refuse_overwrite(args.out, args.force)
    pool = load_pool(_pool_dir(args))
    task = tasks.load_task(args.task)
    report = select_top_m(pool, task, SelectionConfig(k=args.k, m=args.m))
    Path(args.out).write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")
    print(f"selected {report.selected} (top score {report.scores[0][1]:.4f})")
    return 0


def cmd_mix(args) -> int:
    _refuse_overwrite(args.out, args.force)
    pool = load_pool(_pool_dir(args))
    task = tasks.load_task(args.task)
    cfg = _train_cfg(args)
    if args.e is not None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5B]))
        task = task.with_subset(args.e, rng)
    protocol = "black" if args.black else "white"
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAD]))
    row, model, history = harness.adapt_task(
        pool, task, args.m, cfg, cfg.sigma, selection_mode=args.selection,
        k=args.k, protocol=protocol, rng=rng)
    payload = {
        "config": {"protocol": protocol, "m": args.m, "k": args.k,
                   "sigma": cfg.sigma, "lr": cfg.lr, "weight_decay": cfg.weight_decay,
                   "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                   "lambda_new": cfg.lambda_new, "seed": cfg.seed,
                   "e": args.e, "selection": args.selection,
                   "task": task.task_id},
        "selected": row["selected"],
        "selection_report": row["selection_report"],
        "history": {k: history[k] for k in
                    ("epoch", "loss_total", "loss_ce", "loss_dc", "lambda")},
        "degenerate_dc": history["degenerate_dc"],
        "val_acc": row["val_acc"],
        "test_acc": row["test_acc"],
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"{protocol} mix m={args.m}: val={row['val_acc']:.4f} test={row['test_acc']:.4f}")
    return 0


def cmd_grid(args) -> int:
    _refuse_overwrite(args.out, args.force)
    pool = load_pool(_pool_dir(args))
    task = tasks.load_task(args.task)
    cfg = _train_cfg(args)
    lattice = {}
    if args.lrs:
        lattice["lr"] = [float(v) for v in args.lrs.split(",")]
    if args.wds:
        lattice["weight_decay"] = [float(v) for v in args.wds.split(",")]
    if args.lambda_news:
        lattice["lambda_new"] = [float(v) for v in args.lambda_news.split(",")]
    best, table = harness.grid_search(task, pool, lattice, args.m, cfg.seed,
                                      base_cfg=cfg, k=args.k)
    payload = {
        "best": {"lr": best.lr, "weight_decay": best.weight_decay,
                 "lambda_new": best.lambda_new},
        "table": table,
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"best cell: lr={best.lr} wd={best.weight_decay} lambda_new={best.lambda_new}")
    return 0


def cmd_run(args) -> int:
    _refuse_overwrite(args.out, args.force, probe=f"run_seed{_int_list(args.seeds)[0]}.json")
    suite = tasks.load_suite(args.suite)
    base = _train_cfg(args)
    source = replace(base, epochs=args.source_epochs) if args.source_epochs else base
    files = harness.run_experiment(
        suite, args.protocol, _int_list(args.m), _e_list(args.e),
        _int_list(args.seeds), args.out, n_pool=args.n_pool, base_cfg=base,
        source_cfg=source, k=args.k, include_finetune=args.finetune,
        selection_modes=tuple(args.selection.split(",")))
    print(f"wrote {len(files)} run file(s) under {args.out}")
    return 0


def cmd_report(args) -> int:
    _refuse_overwrite(args.out_csv, args.force)
    _refuse_overwrite(args.out_json, args.force)
    runs = []
    for item in args.runs:
        p = Path(item)
        if p.is_dir():
            runs.extend(sorted(p.glob("run_seed*.json")))
        else:
            runs.append(p)
    aggregate = harness.report(runs, args.out_csv, args.out_json)
    print(f"{aggregate['n_rows']} rows -> {args.out_csv}, {args.out_json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recycle",
                                     description="model recycling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_flags(p):
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--theta-init", dest="theta_init", choices=("identity", "random"))

    g = sub.add_parser("gen-tasks", help="generate a synthetic task suite")
    g.add_argument("--kind", choices=("family", "overlap"), default="family")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--families", type=int, default=3)
    g.add_argument("--tasks-per-family", dest="tasks_per_family", type=int, default=4)
    g.add_argument("--clusters-per-family", dest="clusters_per_family", type=int, default=6)
    g.add_argument("--n-tasks", dest="n_tasks", type=int, default=8)
    g.add_argument("--classes-per-task", dest="classes_per_task", type=int, default=4)
    g.add_argument("--samples-per-class", dest="samples_per_class", type=int, default=120)
    g.add_argument("--train-per-class", dest="train_per_class", type=int, default=90)
    g.add_argument("--val-per-class", dest="val_per_class", type=int, default=10)
    g.add_argument("--test-per-class", dest="test_per_class", type=int, default=25)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_tasks)

    b = sub.add_parser("build-pool", help="train source models for a suite")
    b.add_argument("--suite", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--tasks", help="comma-separated task ids (default: all)")
    add_train_flags(b)
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_build_pool)

    s = sub.add_parser("select", help="rank pooled models for a target task")
    s.add_argument("--pool")
    s.add_argument("--task", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_select)

    x = sub.add_parser("mix", help="train a module-mixing model on a target task")
    mode = x.add_mutually_exclusive_group()
    mode.add_argument("--white", action="store_true", default=True)
    mode.add_argument("--black", action="store_true")
    x.add_argument("--pool")
    x.add_argument("--task", required=True)
    x.add_argument("--m", type=int, default=1)
    x.add_argument("--k", type=int, default=5)
    x.add_argument("--lambda-new", dest="lambda_new", type=float)
    x.add_argument("--e", type=int)
    x.add_argument("--selection", choices=("knn", "random"), default="knn")
    add_train_flags(x)
    x.add_argument("--out", required=True)
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_mix)

    gr = sub.add_parser("grid", help="hyperparameter grid search for mixing")
    gr.add_argument("--pool")
    gr.add_argument("--task", required=True)
    gr.add_argument("--m", type=int, default=1)
    gr.add_argument("--k", type=int, default=5)
    gr.add_argument("--lrs")
    gr.add_argument("--wds")
    gr.add_argument("--lambda-news", dest="lambda_news")
    add_train_flags(gr)
    gr.add_argument("--out", required=True)
    gr.add_argument("--force", action="store_true")
    gr.set_defaults(func=cmd_grid)

    r = sub.add_parser("run", help="full pool-then-adapt experiment over a suite")
    r.add_argument("--suite", required=True)
    r.add_argument("--protocol", choices=("white", "black"), default="white")
    r.add_argument("--m", default="1")
    r.add_argument("--e", default="full")
    r.add_argument("--seeds", default="0")
    r.add_argument("--n-pool", dest="n_pool", type=int, default=4)
    r.add_argument("--k", type=int, default=5)
    r.add_argument("--selection", default="knn")
    r.add_argument("--finetune", action="store_true")
    r.add_argument("--source-epochs", dest="source_epochs", type=int)
    add_train_flags(r)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="flatten run files to CSV + JSON aggregate")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out-csv", dest="out_csv", required=True)
    rp.add_argument("--out-json", dest="out_json", required=True)
    rp.add_argument("--force", action="store_true")
    rp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, ValueError, ShapeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, RuntimeError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
