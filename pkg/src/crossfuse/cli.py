"""Command-line entry point: ``crossfuse {generate,train,evaluate,ablate,cam}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from .ablate import TABLE_FILES, run_ablations
from .datagen import GenConfig, GenerationError, generate_dataset, load_dataset, save_dataset
from .model import FusionNet, ModelConfig
from .nn import load_checkpoint
from .scorecam import default_slice, score_cam, write_heatmap_csv, write_pgm
from .train import Arrays, TrainConfig, cross_validate, evaluate, metric_row, write_metrics, write_roc_csv

log = logging.getLogger("crossfuse")

ABLATE_KEYS = ("tables",)


class CommandError(RuntimeError):
    pass


def _train_config(path, data=None, out=None, extra=()):
    cfg, rest = C.load(path, TrainConfig, extra)
    if data:
        cfg.data = data
    if out:
        cfg.out = out
    return cfg, rest


def cmd_generate(args):
    cfg, _ = C.load(args.config, GenConfig)
    cases = generate_dataset(cfg)
    save_dataset(cases, cfg, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")


def _load_arrays(data_dir):
    if not os.path.isdir(data_dir):
        raise CommandError(f"dataset directory {data_dir!r} does not exist")
    cases, gcfg, plan = load_dataset(data_dir)
    if not cases:
        raise CommandError(f"no cases found in {data_dir!r}")
    return Arrays(cases), gcfg, plan


def cmd_train(args):
    cfg, _ = _train_config(args.config, args.data, args.out)
    arr, _, plan = _load_arrays(cfg.data)
    os.makedirs(cfg.out, exist_ok=True)
    report, rows, _, _ = cross_validate(cfg, arr, plan, out_dir=cfg.out, save_models=True)
    write_metrics(rows, os.path.join(cfg.out, "metrics.csv"))
    mean = report.mean()
    print("mean over folds: " + " ".join(f"{k}={v:.4f}" for k, v in mean.items()))


def _load_model(model_dir):
    manifest_path = os.path.join(model_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise CommandError(f"{model_dir!r} is not a checkpoint directory (no manifest.json)")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    model = FusionNet(ModelConfig(**manifest["model_config"]))
    load_checkpoint(model, model_dir)
    return model, manifest


def cmd_evaluate(args):
    model, manifest = _load_model(args.model)
    arr, _, plan = _load_arrays(args.data)
    if not 0 <= args.fold < plan.k:
        raise CommandError(f"fold {args.fold} outside [0, {plan.k})")
    val = plan.validation(args.fold)
    fm, _ = evaluate(model, arr, val)
    tc = manifest.get("train_config", {})
    cfg = TrainConfig(mode=model.cfg.mode, topology=model.cfg.topology, loss=tc.get("loss", "vtmf"))
    row = metric_row(cfg, manifest.get("seed", 0), args.fold, fm)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics([row], os.path.join(args.out, "metrics.csv"))
        if fm.roc is not None:
            write_roc_csv(fm.roc, os.path.join(args.out, f"roc_{cfg.cell_name(row[4], args.fold)}.csv"))
    print(",".join(["mode", "topology", "loss", "fold", "seed", "acc", "recall", "prec", "f1", "auc"]))
    print(",".join(str(v) for v in row))


def cmd_ablate(args):
    cfg, rest = _train_config(args.config, args.data, args.out, ABLATE_KEYS)
    tables = tuple(t.strip() for t in rest.get("tables", "modality,topology,loss").split(",") if t.strip())
    unknown = set(tables) - set(TABLE_FILES)
    if unknown:
        raise CommandError(f"unknown tables {sorted(unknown)}; choose from {sorted(TABLE_FILES)}")
    arr, _, plan = _load_arrays(cfg.data)
    results = run_ablations(cfg, arr, plan, cfg.out, tables)
    for name, rows in results.items():
        for label, s in rows:
            print(f"{name:9s} {label:12s} auc {s['auc_mean']:.4f} +- {s['auc_std']:.4f}"
                  + (f"  ({s['failed']} failed)" if s["failed"] else ""))


def cmd_cam(args):
    model, manifest = _load_model(args.model)
    data = args.data or manifest.get("train_config", {}).get("data")
    if not data:
        raise CommandError("no dataset: pass --data or train with a config that sets data")
    cases, _, _ = load_dataset(data)
    by_id = {c.case_id: c for c in cases}
    if args.case not in by_id:
        raise CommandError(f"case {args.case} not in {data!r}")
    case = by_id[args.case]
    depth = case.volume.values.shape[0]
    slice_index = default_slice(depth) if args.slice is None else args.slice
    if not 0 <= slice_index < depth:
        raise CommandError(f"slice {slice_index} outside depth {depth}")
    heat, info = score_cam(model, case.volume.values, case.report.token_ids, case.report.pad_mask,
                           slice_index, target=args.target)
    out = args.out
    base = out[:-4] if out.endswith(".pgm") else out
    write_pgm(heat, base + ".pgm")
    write_heatmap_csv(heat, base + ".csv")
    print(f"case {args.case} slice {slice_index} target {info['target']}: wrote {base}.pgm and {base}.csv")


def build_parser():
    p = argparse.ArgumentParser(prog="crossfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="cross-validated training")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on one validation fold")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold", required=True, type=int)
    e.add_argument("--out", help="optional directory for metrics.csv and the ROC curve")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="modality, topology and loss grids")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cam", help="Score-CAM heatmap for one case")
    c.add_argument("--model", required=True)
    c.add_argument("--case", required=True, type=int)
    c.add_argument("--slice", type=int, default=None)
    c.add_argument("--out", required=True, help="output path; .pgm and .csv files are written")
    c.add_argument("--data", help="dataset directory (defaults to the one used for training)")
    c.add_argument("--target", type=int, choices=(0, 1), default=None)
    c.set_defaults(func=cmd_cam)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    np.seterr(over="ignore", under="ignore")
    try:
        args.func(args)
    except (CommandError, C.ConfigFileError, GenerationError, OSError, KeyError, ValueError) as exc:
        print(f"crossfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
