"""Experiment orchestration: pooling, adaptation, grid search, and reports.

The central loop mirrors a growing-library workflow: seed a pool from the
first tasks of a suite, then for every remaining task select sources, adapt
with module mixing at each requested subset size, evaluate, and finally
train a full-data independent model that joins the pool before the next
task arrives. Results land in per-seed JSON run files; ``report`` flattens
them into a CSV plus a JSON aggregate. Everything is deterministic given
the seeds; run files carry no timestamps.
"""

from __future__ import annotations

import csv
import itertools
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .blackbox import BLACKBOX_TARGET, build_blackbox_model, pool_feature_api
from .eft import EftConfig
from .mixing import build_mixed_model, finetune_source, train_independent, train_mixed
from .selection import SelectionConfig, select_top_m
from .sources import Backbone, BackboneConfig, Pool, append_model, init_pool, train_source
from .tasks import Suite, TaskSpec, TrainConfig


def _child_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _lambda_digest(history: dict) -> str:
    lam = history.get("lambda")
    if not lam:
        return ""
    return "|".join(f"{w:.4f}" for w in lam[-1][-1])


def select_ids(pool: Pool, task: TaskSpec, m: int, k: int, mode: str,
               rng: np.random.Generator | None = None) -> tuple[list[str], dict | None]:
    """Pick m source ids by k-NN ranking or uniformly at random."""
    if mode == "knn":
        report = select_top_m(pool, task, SelectionConfig(k=k, m=m))
        return report.selected, report.to_json()
    if mode == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        ids = [r.model_id for r in pool.records]
        picked = rng.choice(len(ids), size=m, replace=False)
        return [ids[i] for i in sorted(picked)], None
    raise ValueError(f"unknown selection mode {mode!r}")


def adapt_task(pool: Pool, task: TaskSpec, m: int, train_cfg: TrainConfig,
               sigma: float, selection_mode: str = "knn", k: int = 5,
               protocol: str = "white", rng: np.random.Generator | None = None):
    """Select sources and train one mixed model; returns (row, model, history)."""
    ids, sel_report = select_ids(pool, task, m, k, selection_mode, rng)
    if protocol == "white":
        model = build_mixed_model(pool, ids, task, train_cfg)
    elif protocol == "black":
        apis = [pool_feature_api(pool.record(i), pool.backbone) for i in ids]
        target = Backbone.create(BLACKBOX_TARGET, seed=_child_seed(train_cfg.seed, 0xB0))
        model = build_blackbox_model(apis, target, pool.eft_cfg, task, train_cfg)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    history = train_mixed(model, task, sigma, train_cfg)
    row = {
        "task": task.task_id,
        "method": "mix",
        "selection": selection_mode,
        "m": m,
        "e": task.subset_e,
        "seed": train_cfg.seed,
        "val_acc": history["val_acc"],
        "test_acc": model.accuracy(task, "test"),
        "selected": ids,
        "lambda_digest": _lambda_digest(history),
        "selection_report": sel_report,
    }
    return row, model, history


def grid_search(task: TaskSpec, pool: Pool, lattice: dict, m: int, seed: int,
                base_cfg: TrainConfig | None = None, k: int = 5,
                protocol: str = "white") -> tuple[TrainConfig, list[dict]]:
    """Train one mixed model per lattice cell; best validation accuracy wins.

    The lattice maps "lr" / "weight_decay" / "lambda_new" to value lists.
    Cells that abort are recorded with their error and excluded; ties go to
    the earlier cell in lattice order.
    """
    base_cfg = base_cfg or TrainConfig()
    lrs = list(lattice.get("lr", base_cfg.grid_lrs))
    wds = list(lattice.get("weight_decay", base_cfg.grid_wds))
    lams = list(lattice.get("lambda_new", base_cfg.grid_lambda_new))
    if not lrs or not wds or not lams:
        raise ValueError("grid lattice must be non-empty on every axis")
    table: list[dict] = []
    best: tuple[float, int] | None = None
    for i, (lr, wd, lam) in enumerate(itertools.product(lrs, wds, lams)):
        cfg = replace(base_cfg, lr=lr, weight_decay=wd, lambda_new=lam, seed=seed)
        cell = {"lr": lr, "weight_decay": wd, "lambda_new": lam}
        try:
            row, _, _ = adapt_task(pool, task, m, cfg, base_cfg.sigma,
                                   selection_mode="knn", k=k, protocol=protocol)
            cell.update(val_acc=row["val_acc"], test_acc=row["test_acc"])
            if best is None or row["val_acc"] > best[0]:
                best = (row["val_acc"], i)
        except Exception as exc:  # aborted cell: record, exclude, continue
            cell.update(error=f"{type(exc).__name__}: {exc}")
        table.append(cell)
    if best is None:
        raise RuntimeError("every grid cell aborted")
    winner = table[best[1]]
    best_cfg = replace(base_cfg, lr=winner["lr"], weight_decay=winner["weight_decay"],
                       lambda_new=winner["lambda_new"], seed=seed)
    return best_cfg, table


def lambda_sweep(pool: Pool, task: TaskSpec, grid, base_cfg: TrainConfig,
                 k: int = 5) -> list[dict]:
    """Feature-mixing-only sweep over fixed source weights for the top-1 source.

    At weight 0 the model is an independent one; at weight 1 only the head
    trains on top of the frozen source's features.
    """
    ids, _ = select_ids(pool, task, 1, k, "knn")
    j = pool.backbone.cfg.n_layers
    rows = []
    for lam_source in grid:
        fixed = np.tile([float(lam_source), 1.0 - float(lam_source)], (j + 1, 1))
        model = build_mixed_model(pool, ids, task, base_cfg, feature_only=True,
                                  fixed_lambda=fixed)
        history = train_mixed(model, task, 0.0, base_cfg)
        rows.append({"lambda_source": float(lam_source),
                     "val_acc": history["val_acc"],
                     "test_acc": model.accuracy(task, "test")})
    return rows


def build_pool_from_tasks(pool_dir, tasks: list[TaskSpec], backbone: Backbone,
                          eft_cfg: EftConfig, source_cfg: TrainConfig,
                          start_index: int = 0) -> Pool:
    pool = init_pool(pool_dir, backbone, eft_cfg)
    for i, task in enumerate(tasks):
        cfg = replace(source_cfg, seed=_child_seed(source_cfg.seed, start_index + i))
        record = train_source(task, backbone, eft_cfg, cfg,
                              model_id=f"m{start_index + i:03d}_{task.task_id}")
        append_model(pool, record)
    return pool


def run_experiment(suite: Suite, protocol: str, m_list, e_list, seeds,
                   out_dir, n_pool: int = 4, base_cfg: TrainConfig | None = None,
                   source_cfg: TrainConfig | None = None, k: int = 5,
                   include_finetune: bool = False,
                   selection_modes=("knn",)) -> list[Path]:
    """Pool-then-adapt-then-append loop over a suite, one run file per seed."""
    base_cfg = base_cfg or TrainConfig()
    source_cfg = source_cfg or base_cfg
    m_list = [int(m) for m in m_list]
    if m_list and n_pool < max(m_list):
        raise ValueError(f"n_pool={n_pool} is below the largest requested m={max(m_list)}")
    if n_pool >= len(suite.tasks):
        raise ValueError(f"n_pool={n_pool} leaves no target tasks out of {len(suite.tasks)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_files = []
    for seed in seeds:
        seed = int(seed)
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEC]))
        order = order_rng.permutation(len(suite.tasks))
        backbone = Backbone.create(BackboneConfig(), seed=_child_seed(seed, 0xBB))
        eft_cfg = EftConfig()
        pool = build_pool_from_tasks(
            out_dir / f"pool_seed{seed}", [suite.tasks[i] for i in order[:n_pool]],
            backbone, eft_cfg, replace(source_cfg, seed=seed))
        rows: list[dict] = []
        for pos, ti in enumerate(order[n_pool:]):
            task = suite.tasks[int(ti)]
            for e in e_list:
                sub_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, int(ti), 0 if e is None else int(e)]))
                sub = task if e is None else task.with_subset(int(e), sub_rng)
                cell_seed = _child_seed(seed, int(ti), 0 if e is None else int(e))
                cfg = replace(base_cfg, seed=cell_seed)
                ind_model, ind_history = train_independent(sub, pool.backbone, pool.eft_cfg, cfg)
                rows.append({
                    "task": task.task_id, "method": "independent", "selection": "none",
                    "m": 0, "e": e, "seed": seed,
                    "val_acc": ind_history["val_acc"],
                    "test_acc": ind_model.accuracy(sub, "test"),
                    "selected": [], "lambda_digest": "", "selection_report": None})
                if include_finetune:
                    top1, _ = select_ids(pool, sub, 1, k, "knn")
                    ft_model, ft_history = finetune_source(
                        pool.record(top1[0]), sub, pool.backbone, cfg)
                    rows.append({
                        "task": task.task_id, "method": "finetune", "selection": "knn",
                        "m": 1, "e": e, "seed": seed,
                        "val_acc": ft_history["val_acc"],
                        "test_acc": ft_model.accuracy(sub, "test"),
                        "selected": top1, "lambda_digest": "",
                        "selection_report": None})
                for mode in selection_modes:
                    mode_rng = np.random.default_rng(
                        np.random.SeedSequence([seed, int(ti), 0xAD]))
                    for m in m_list:
                        row, _, _ = adapt_task(pool, sub, m, cfg, base_cfg.sigma,
                                               selection_mode=mode, k=k,
                                               protocol=protocol, rng=mode_rng)
                        row.update(seed=seed)
                        rows.append(row)
            full_cfg = replace(source_cfg, seed=_child_seed(seed, int(ti), 0xF0))
            record = train_source(task, pool.backbone, pool.eft_cfg, full_cfg,
                                  model_id=f"m{n_pool + pos:03d}_{task.task_id}")
            append_model(pool, record)
        run = {
            "protocol": protocol,
            "seed": seed,
            "n_pool": n_pool,
            "m_list": m_list,
            "e_list": [e for e in e_list],
            "k": k,
            "task_order": [suite.tasks[int(i)].task_id for i in order],
            "rows": rows,
        }
        path = out_dir / f"run_seed{seed}.json"
        path.write_text(json.dumps(run, sort_keys=True, indent=2) + "\n")
        run_files.append(path)
    return run_files


CSV_COLUMNS = ["task", "method", "selection", "m", "e", "seed",
               "val_acc", "test_acc", "lambda_digest"]


def report(run_files, out_csv, out_json) -> dict:
    """Flatten run files to CSV and aggregate means/stddevs per cell.

    Unparseable run files are skipped with a warning on stderr. Aggregation
    groups rows by (method, selection, m, e); stddevs are population
    stddevs, so a single-seed cell reports 0.
    """
    rows: list[dict] = []
    for path in run_files:
        try:
            run = json.loads(Path(path).read_text())
            rows.extend(run["rows"])
        except (OSError, ValueError, KeyError) as exc:
            print(f"warning: skipping malformed run file {path}: {exc}", file=sys.stderr)
    rows.sort(key=lambda r: (r["task"], r["method"], r["selection"],
                             r["m"], -1 if r["e"] is None else r["e"], r["seed"]))
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((row["method"], row["selection"], row["m"], row["e"]), []).append(row)
    aggregate = {
        "n_rows": len(rows),
        "sum_test_acc": float(np.sum([r["test_acc"] for r in rows])) if rows else 0.0,
        "cells": [],
    }
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[2], -1 if k[3] is None else k[3])):
        group = cells[key]
        test = np.array([r["test_acc"] for r in group], dtype=np.float64)
        val = np.array([r["val_acc"] for r in group], dtype=np.float64)
        aggregate["cells"].append({
            "method": key[0], "selection": key[1], "m": key[2], "e": key[3],
            "n": len(group),
            "mean_test_acc": float(test.mean()),
            "std_test_acc": float(test.std()),
            "mean_val_acc": float(val.mean()),
            "std_val_acc": float(val.std()),
        })
    Path(out_json).write_text(json.dumps(aggregate, sort_keys=True, indent=2) + "\n")
    return aggregate
