"""Command-line entry point.

Every command accepts ``--config run.json`` and repeatable ``--set key=value``
overrides (dotted keys, JSON values), writes a frozen copy of the resolved
configuration to ``<out>/config/<command>.json`` and lays out artifacts as
``config/``, ``checkpoints/``, ``reports/`` and ``figures/``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as runcfg
from .augment import apply_transform, sample_rng, sample_transform
from .checkpoint import load_model, save_model
from .dataio import (CLASS_NAMES, DataFormatError, generate_synthetic_dataset, load_dataset, load_fer_csv,
                     load_raf_db, merge_ferplus, read_mapping, write_fer_csv)
from .evaluation import evaluate, render_report
from .explain import grad_cam, render_overlay
from .imaging import image_grid, read_image, write_png
from .infer import benchmark_latency, predict, predict_tta, write_benchmark_csv
from .models import BACKBONE_KINDS, ConfigError, build_backbone_classifier
from .train import distill, train_ensemble, run_training, write_history_csv

log = logging.getLogger("emoxnet")

LAYOUT = ("config", "checkpoints", "reports", "figures")
CHECKPOINT_ORDER = [f"backbone_{k}.ckpt" for k in BACKBONE_KINDS] + ["emoxnet.ckpt", "emoxnetlite.ckpt"]

CONFIG_KEYS = """config keys (JSON document, dotted names for --set):
  seed                               seed for every seeded component
  data.path                          dataset (.csv in FER layout or .npz)
  augment.{hflip,vflip,rotation_max,width_shift_max,height_shift_max,
           shear_max,zoom_low,zoom_high,fill}
  backbones.<kind>.{kind,stage_widths,blocks_per_stage,se_ratio,
           cardinality,growth}      kinds: plain_conv dense_block se_residual se_grouped
  ensemble.{head_hidden,dropout_rate,finetune}
  student.{stage_widths,blocks_per_stage,max_param_ratio,hard_weight,
          epochs}                   epochs: null reuses train.epochs
  train.{lr0,momentum,decay,epochs,batch_size,alpha,early_stop_patience,
         plateau_patience,plateau_factor,monitor,weight_decay,augment}
  tta.{steps,seed,policy.*}
"""


class CommandError(Exception):
    """Runtime failure reported as a diagnostic with exit code 1."""


def _run_dirs(out: str | Path) -> dict[str, Path]:
    root = Path(out)
    dirs = {name: root / name for name in LAYOUT}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _data_path(args, cfg) -> Path:
    path = args.data or cfg["data"]["path"]
    if not path:
        raise ConfigError("data.path: no dataset given (use --data or set data.path)")
    if not Path(path).exists():
        raise ConfigError(f"data.path: {path} does not exist")
    cfg["data"]["path"] = str(path)
    return Path(path)


def _class_index(value: str) -> int:
    if value.isdigit():
        return int(value)
    if value not in CLASS_NAMES:
        raise ConfigError(f"class: unknown class {value!r}; expected an index or one of {CLASS_NAMES}")
    return CLASS_NAMES.index(value)


# ------------------------------------------------------------------ commands

def cmd_synth_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic_dataset(args.n, cfg["seed"])
    write_fer_csv(ds, out / "synthetic.csv")
    np.save(out / "synthetic_masks.npy", ds.masks)
    runcfg.freeze(cfg, out / "config" / "synth-data.json")
    print(f"wrote {len(ds)} examples to {out / 'synthetic.csv'}")


def _save_dataset(ds, args, cfg, command):
    dirs = _run_dirs(args.out)
    path = ds.save(Path(args.out) / "dataset.npz")
    runcfg.freeze(cfg, dirs["config"] / f"{command}.json")
    counts = {s: int((ds.splits == s).sum()) for s in ("train", "val", "test")}
    print(f"wrote {len(ds)} examples ({counts}) to {path}")


def cmd_prepare_fer(args, cfg):
    _save_dataset(load_fer_csv(args.csv), args, cfg, "prepare-fer")


def cmd_prepare_ferplus(args, cfg):
    base = load_fer_csv(args.csv)
    merged = merge_ferplus(base, args.votes, mode=args.mode)
    print(f"FER+ merge kept {len(merged)} of {len(base)} rows")
    _save_dataset(merged, args, cfg, "prepare-ferplus")


def cmd_prepare_raf(args, cfg):
    mapping = read_mapping(args.mapping) if args.mapping else None
    ds = load_raf_db(args.root, args.list, mapping, val_fraction=args.val_fraction, seed=cfg["seed"])
    _save_dataset(ds, args, cfg, "prepare-raf")


def cmd_augment_preview(args, cfg):
    dirs = _run_dirs(args.out)
    if args.image:
        img = read_image(args.image)
    else:
        img = load_dataset(_data_path(args, cfg)).images[args.index]
    policy = runcfg.augment_policy(cfg)
    views = [img] + [apply_transform(img, sample_transform(policy, sample_rng(cfg["seed"], 0, i)))
                     for i in range(args.n - 1)]
    path = write_png(image_grid(views, ncols=min(args.n, 8)), dirs["figures"] / "augment_preview.png")
    runcfg.freeze(cfg, dirs["config"] / "augment-preview.json")
    print(f"wrote {path}")


def cmd_train_backbone(args, cfg):
    ds = load_dataset(_data_path(args, cfg))
    dirs = _run_dirs(args.out)
    runcfg.freeze(cfg, dirs["config"] / f"train-backbone-{args.kind}.json")
    tcfg = runcfg.train_config(cfg)
    e = cfg["ensemble"]
    model = build_backbone_classifier(runcfg.backbone_config(cfg, args.kind), e["head_hidden"],
                                      e["dropout_rate"], seed=cfg["seed"])
    result = run_training(model, ds, tcfg, policy=runcfg.augment_policy(cfg))
    write_history_csv(result.history, dirs["reports"] / f"history_backbone_{args.kind}.csv")
    save_model(model, dirs["checkpoints"] / f"backbone_{args.kind}.ckpt",
               {"best_epoch": result.best_epoch, "best_val_accuracy": result.best_value})
    print(f"{args.kind}: best val accuracy {result.best_value:.4f} at epoch {result.best_epoch}")


def cmd_train_ensemble(args, cfg):
    ds = load_dataset(_data_path(args, cfg))
    dirs = _run_dirs(args.out)
    runcfg.freeze(cfg, dirs["config"] / "train-ensemble.json")
    paths = args.backbones or [dirs["checkpoints"] / f"backbone_{k}.ckpt" for k in cfg["backbones"]]
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"backbones: missing checkpoints {missing}")
    members = [load_model(p)[0] for p in paths]
    e = cfg["ensemble"]
    model, results = train_ensemble(members, ds, runcfg.train_config(cfg), e["head_hidden"], e["dropout_rate"],
                                    finetune=e["finetune"], policy=runcfg.augment_policy(cfg))
    write_history_csv([h for r in results for h in r.history], dirs["reports"] / "history_emoxnet.csv")
    save_model(model, dirs["checkpoints"] / "emoxnet.ckpt",
               {"best_val_accuracy": results[-1].best_value, "members": [str(p) for p in paths]})
    print(f"EmoXNet: best val accuracy {results[-1].best_value:.4f}, head input {model.head_input_dim}")


def cmd_distill(args, cfg):
    ds = load_dataset(_data_path(args, cfg))
    dirs = _run_dirs(args.out)
    runcfg.freeze(cfg, dirs["config"] / "distill.json")
    teacher_path = Path(args.teacher or dirs["checkpoints"] / "emoxnet.ckpt")
    if not teacher_path.is_file():
        raise ConfigError(f"teacher: checkpoint {teacher_path} does not exist")
    teacher, _ = load_model(teacher_path)
    student, result = distill(teacher, ds, runcfg.distill_train_config(cfg), runcfg.student_config(cfg),
                              hard_weight=cfg["student"]["hard_weight"], policy=runcfg.augment_policy(cfg))
    write_history_csv(result.history, dirs["reports"] / "history_emoxnetlite.csv")
    save_model(student, dirs["checkpoints"] / "emoxnetlite.ckpt",
               {"teacher": str(teacher_path), "best_val_accuracy": result.best_value})
    print(f"EmoXNetLite: best val accuracy {result.best_value:.4f}")


def _checkpoints(args, dirs) -> list[Path]:
    if args.checkpoints:
        return [Path(p) for p in args.checkpoints]
    found = [dirs["checkpoints"] / n for n in CHECKPOINT_ORDER if (dirs["checkpoints"] / n).is_file()]
    if not found:
        raise ConfigError(f"checkpoints: none given and none found in {dirs['checkpoints']}")
    return found


def cmd_evaluate(args, cfg):
    ds = load_dataset(_data_path(args, cfg))
    dirs = _run_dirs(args.out)
    runcfg.freeze(cfg, dirs["config"] / "evaluate.json")
    split = ds.split(args.split)
    tta = runcfg.tta_config(cfg, args.tta) if args.tta else None
    reports = []
    for path in _checkpoints(args, dirs):
        model, _ = load_model(path)
        name = model.name if model.name != "classifier" else path.stem
        reports.append(evaluate(model, split, tta, name=name))
        print(f"{name}: accuracy {reports[-1].accuracy:.4f}")
    render_report(reports, dirs["reports"])


def cmd_predict(args, cfg):
    model, _ = load_model(args.checkpoint)
    img = read_image(args.image)
    probs = predict_tta(model, img, runcfg.tta_config(cfg, args.tta)) if args.tta else predict(model, img)
    print(CLASS_NAMES[int(np.argmax(probs))])
    for name, p in zip(CLASS_NAMES, probs):
        print(f"{name:9s} {p:.6f}")


def cmd_cam(args, cfg):
    model, _ = load_model(args.checkpoint)
    img = read_image(args.image)
    heat = grad_cam(model, img, _class_index(args.class_))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_overlay(img, heat, out)
    print(f"wrote {out}")


def cmd_bench(args, cfg):
    dirs = _run_dirs(args.out)
    runcfg.freeze(cfg, dirs["config"] / "bench.json")
    reports = []
    for path in _checkpoints(args, dirs):
        model, _ = load_model(path)
        r = benchmark_latency(model, args.warmup, args.runs, name=path.stem)
        reports.append(r)
        print(f"{r.model}: {r.params} params, median {r.median_ms:.3f} ms, p95 {r.p95_ms:.3f} ms")
    write_benchmark_csv(reports, dirs["reports"] / "bench.csv")


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emoxnet", description="Ensemble / distillation pipeline for 7-class expression recognition.",
        epilog=CONFIG_KEYS, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_, data=False, out=True):
        p = sub.add_parser(name, help=help_, epilog=CONFIG_KEYS, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
        if data:
            p.add_argument("--data", help="dataset: FER-layout .csv or prepared .npz")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate the synthetic bars corpus")
    p.add_argument("--n", type=int, default=400, help="examples per class")
    p = add("prepare-fer", cmd_prepare_fer, "load a FER2013 CSV into a dataset file")
    p.add_argument("--csv", required=True)
    p = add("prepare-ferplus", cmd_prepare_ferplus, "relabel FER2013 with FER+ votes")
    p.add_argument("--csv", required=True)
    p.add_argument("--votes", required=True)
    p.add_argument("--mode", choices=("onehot", "distribution"), default="onehot")
    p = add("prepare-raf", cmd_prepare_raf, "load RAF-DB single-label images")
    p.add_argument("--root", required=True)
    p.add_argument("--list", required=True)
    p.add_argument("--mapping", help="label mapping file (label = class-name per line)")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p = add("augment-preview", cmd_augment_preview, "grid of augmented variants", data=True)
    p.add_argument("--image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p = add("train-backbone", cmd_train_backbone, "train one backbone with the MLP head", data=True)
    p.add_argument("--kind", required=True, choices=BACKBONE_KINDS)
    p = add("train-ensemble", cmd_train_ensemble, "fuse trained backbones (EmoXNet)", data=True)
    p.add_argument("--backbones", nargs="+")
    p = add("distill", cmd_distill, "distill the ensemble into the student (EmoXNetLite)", data=True)
    p.add_argument("--teacher")
    p = add("evaluate", cmd_evaluate, "accuracy / F1 / confusion reports", data=True)
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tta", type=int, default=0, help="TTA steps (0 = single pass)")
    p = add("predict", cmd_predict, "classify one image", out=False)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta", type=int, default=0)
    p = add("cam", cmd_cam, "class activation heatmap overlay", out=False)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_", required=True, help="class name or index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p = add("bench", cmd_bench, "single-image latency benchmark")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = runcfg.resolve(args.config, overrides)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
