"""Modality, topology, and loss-component ablation grids.

Each grid row is one training configuration evaluated over every seed and
fold. Identical configurations shared between grids are trained once.
"""
from __future__ import annotations

import csv
import logging
import os

from .model import TOPOLOGIES
from .train import TrainConfig, cross_validate, write_metrics

log = logging.getLogger(__name__)

METRICS = ("accuracy", "recall", "precision", "f1", "auc")
SHORT = {"accuracy": "acc", "recall": "recall", "precision": "prec", "f1": "f1", "auc": "auc"}

MODALITY_ROWS = ("text-only", "vision-only", "fused")
LOSS_ROWS = ("imima", "sdm", "mlm", "imima+sdm", "imima+mlm", "vtmf")


def grids(base: TrainConfig):
    """``{table name: [(row label, config), ...]}``."""
    return {
        "modality": [(m, base.replace(mode=m)) for m in MODALITY_ROWS],
        "topology": [(t, base.replace(mode="fused", topology=t)) for t in TOPOLOGIES],
        "loss": [(l, base.replace(mode="fused", loss=l)) for l in LOSS_ROWS],
    }


def _key(cfg):
    return (cfg.mode, cfg.topology, cfg.loss)


def summarize(report, n_cells, failures):
    row = {"cells": n_cells, "failed": len(failures)}
    if report.folds:
        mean, std = report.mean(), report.std()
    else:
        mean = std = {k: float("nan") for k in METRICS}
    for k in METRICS:
        row[f"{SHORT[k]}_mean"] = mean[k]
        row[f"{SHORT[k]}_std"] = std[k]
    return row


def _fmt(x):
    return "nan" if x != x else f"{x:.6f}"


def write_table(rows, path):
    cols = ["row"] + [f"{SHORT[k]}_{s}" for k in METRICS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols + ["cells", "failed", "status"])
        for label, summary in rows:
            status = "ok" if summary["failed"] == 0 else f"failed:{summary['failed']}"
            wr.writerow([label] + [_fmt(summary[c]) for c in cols[1:]]
                        + [summary["cells"], summary["failed"], status])


TABLE_FILES = {"modality": "table1_modality.csv", "topology": "table2_topology.csv",
               "loss": "table3_loss.csv"}


def run_ablations(base: TrainConfig, arr, plan, out_dir, tables=("modality", "topology", "loss"),
                  cache=None, keep=(), models=None):
    """Run the selected grids and write one CSV per table plus ``metrics.csv``.

    ``cache`` (a dict) carries finished cells across calls so a later call
    reuses them; ``models`` (a dict) receives ``{(mode, topology, loss):
    {(seed, fold): model}}`` for the row keys listed in ``keep``.
    Returns ``{table: [(row label, summary dict), ...]}``.
    """
    os.makedirs(out_dir, exist_ok=True)
    done = {} if cache is None else cache
    results = {}
    for name, rows in grids(base).items():
        if name not in tables:
            continue
        table = []
        for label, cfg in rows:
            key = _key(cfg)
            if key not in done:
                keep_models = models is not None and key in keep
                report, metric_rows, failures, trained = cross_validate(
                    cfg, arr, plan, out_dir=out_dir, keep_going=True, keep_models=keep_models)
                n = len(cfg.seeds) * len(cfg.folds)
                done[key] = (summarize(report, n, failures), metric_rows)
                if keep_models:
                    models[key] = trained
                log.info("%s/%s: auc %.4f (%d failed)", name, label, done[key][0]["auc_mean"], len(failures))
            table.append((label, done[key][0]))
        write_table(table, os.path.join(out_dir, TABLE_FILES[name]))
        results[name] = table
    all_rows = [r for _, rows in done.values() for r in rows]
    write_metrics(all_rows, os.path.join(out_dir, "metrics.csv"))
    return results
