"""Command-line entry points: prepare, synth, optimize, segment, evaluate, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 checkpoint/backbone incompatibility.
"""
import argparse
import csv
import itertools
import json
import logging
import os
import platform
import sys

import numpy
import torch
import yaml

from . import __version__
from . import config as cfglib
from .backbone import build_backbone
from .checkpoint import load_embeddings, read_checkpoint, save_embeddings
from .data import celeba, pascal
from .data.samples import (file_digest, list_images, load_samples, read_image, save_samples,
                           write_manifest, write_mask, write_image)
from .data.split import sample_split
from .data.synthetic import multi_region_sample, two_region_sample
from .errors import ConfigurationError, EvalError, IngestionError, PartSegError
from .eval import TABLE_COLUMNS, emit_table, evaluate
from .inference import render_overlay, segment, segment_patched
from .optimize import optimize

log = logging.getLogger("partseg")

DATASETS = {"pascal-car": "car", "pascal-horse": "horse", "celeba": "face"}
LOSS_FIELDS = ["epoch", "sample", "t", "l_ce", "l_mse", "l_ldm", "alpha", "beta", "total", "val_miou"]


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _config(args):
    cfg = cfglib.load_config(getattr(args, "config", None))
    if getattr(args, "backbone", None):
        cfg = cfglib.set_key(cfg, "backbone.name", args.backbone)
    if getattr(args, "backbone_seed", None) is not None:
        cfg = cfglib.set_key(cfg, "backbone.seed", args.backbone_seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfglib.set_key(cfg, "optimization.epochs", args.epochs)
    return cfg


def _backbone(cfg):
    return build_backbone(cfg["backbone"]["name"], **cfglib.backbone_options(cfg))


def _checkpoint_backbone(header, cfg, explicit):
    """The backbone a checkpoint was made for, unless one was chosen on the command line."""
    desc = header.get("backbone")
    if explicit or not desc:
        return _backbone(cfg)
    if desc["name"] == "toy":
        return build_backbone("toy", seed=int(desc.get("extra", {}).get("seed", 0)))
    return build_backbone(desc["name"], **cfglib.backbone_options(cfg))


def _versions():
    return {"partseg": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": numpy.__version__}


def _sample_digests(directory, samples):
    out = {}
    for s in samples:
        out[s.source_id] = {kind: file_digest(os.path.join(directory, f"{s.source_id}.{kind}.png"))
                            for kind in ("img", "mask")}
    return out


def _load_dir(directory, class_names=None, what="samples"):
    if not directory:
        raise ConfigurationError(f"no {what} directory given")
    samples = load_samples(directory, class_names)
    if not samples:
        raise EvalError(f"{directory}: no {what} found")
    return samples


def table_columns(class_names):
    """Published column order when the class schema matches a known dataset, else None."""
    names = {n.lower() for n in class_names}
    for cols in TABLE_COLUMNS.values():
        if {c.lower() for c in cols} == names:
            return cols
    return None


def _write_reports(out_dir, reports, stem):
    rep_dir = os.path.join(out_dir, "reports")
    cols = table_columns(reports[0].class_names)
    _write_text(os.path.join(rep_dir, f"{stem}.md"), emit_table(reports, "markdown", cols))
    _write_text(os.path.join(rep_dir, f"{stem}.csv"), emit_table(reports, "csv", cols))
    _write_json(os.path.join(rep_dir, f"{stem}.json"), [r.to_dict() for r in reports])
    return rep_dir


def _write_loss_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, LOSS_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in LOSS_FIELDS})


def run_optimization(cfg, train_dir, val_dir, ckpt):
    train = _load_dir(train_dir, what="training samples")
    val = _load_dir(val_dir, train[0].class_names, "validation samples") if val_dir else None
    backbone = _backbone(cfg)
    result = optimize(train, backbone, cfglib.optimization_config(cfg), validation=val)
    save_embeddings(result.embeddings, ckpt, config=cfg, descriptor=backbone.descriptor)
    manifest = {
        "command": "optimize",
        "config": cfg,
        "optimization": result.manifest,
        "inputs": {"train": _sample_digests(train_dir, train),
                   "val": _sample_digests(val_dir, val) if val else {}},
        "checkpoint_sha256": file_digest(ckpt),
        "versions": _versions(),
    }
    _write_json(ckpt + ".manifest.json", manifest)
    _write_loss_csv(ckpt + ".loss.csv", result.history)
    return result, backbone


def run_evaluation(cfg, emb, backbone, test, seeds, name):
    inf = cfg["inference"]
    return evaluate(emb, test, backbone, seeds=seeds, name=name, t_test=inf["t_test"], gate=inf["gate"],
                    use_was=inf["use_was"], target=tuple(inf["target_size"]), patch=inf["patch"],
                    mode=inf["iou_mode"], cross_layers=cfg["optimization"]["cross_layers"],
                    self_layers=cfg["optimization"]["self_layers"])


# ---- commands ---------------------------------------------------------------

def cmd_prepare(args):
    category = DATASETS[args.dataset]
    if not os.path.isdir(args.raw):
        raise IngestionError(f"raw data directory not found: {args.raw}")
    prep = {"dataset": args.dataset, "n": args.n, "seed": args.seed}
    stats = None
    if category == "face":
        indices = celeba.list_indices(args.raw)
        if args.limit:
            indices = indices[:args.limit]
        samples = celeba.prepare_celeba(args.raw, indices)
    else:
        prep.update(overlap_threshold=args.overlap, overlap_denominator=args.overlap_denominator)
        samples, stats = pascal.prepare_pascal_part(pascal.read_pascal_part(args.raw), category,
                                                    args.overlap, args.overlap_denominator)
    if not samples:
        raise IngestionError(f"{args.raw}: no usable samples after preparation")
    root = os.path.join(args.out, category)
    if args.n:
        train, val, test = sample_split(samples, args.n, args.seed)
        splits = {"train": train, "val": val, "test": test}
    else:
        splits = {"all": samples}
    for name, group in splits.items():
        save_samples(group, os.path.join(root, name))
    manifest = {
        "class_names": list(samples[0].class_names),
        "counts": {k: len(v) for k, v in splits.items()},
        "ids": {k: [s.source_id for s in v] for k, v in splits.items()},
        "prep": prep,
        "filter_stats": stats,
    }
    write_manifest(root, manifest)
    print(f"prepared {len(samples)} samples under {root}")
    return 0


def cmd_synth(args):
    make = {"two_region": two_region_sample, "multi_region": multi_region_sample}[args.kind]
    samples = [make(size=args.size, seed=args.seed + i, source_id=f"{args.kind}_{i:03d}") for i in range(args.count)]
    save_samples(samples, args.out)
    write_manifest(args.out, {"class_names": samples[0].class_names, "counts": {"all": len(samples)},
                              "prep": {"synthetic": args.kind, "seed": args.seed, "size": args.size}})
    print(f"wrote {len(samples)} {args.kind} samples to {args.out}")
    return 0


def cmd_optimize(args):
    cfg = _config(args)
    train_dir = args.train or cfg["data"]["train"]
    val_dir = args.val or cfg["data"]["val"]
    if not train_dir:
        raise ConfigurationError("--train is required (or data.train in the config)")
    result, _ = run_optimization(cfg, train_dir, val_dir, args.out)
    last = result.history[-1]["total"] if result.history else float("nan")
    print(f"wrote {args.out} ({len(result.history)} steps, final loss {last:.4f})")
    return 0


def cmd_segment(args):
    cfg = _config(args)
    header, _ = read_checkpoint(args.ckpt)
    backbone = _checkpoint_backbone(header, cfg, explicit=bool(args.backbone))
    emb = load_embeddings(args.ckpt, backbone)
    inf = cfg["inference"]
    seed = inf["seed"] if args.seed is None else args.seed
    names = list_images(args.images)
    if not names:
        raise IngestionError(f"{args.images}: no images found")
    os.makedirs(args.out, exist_ok=True)
    ckpt_digest = file_digest(args.ckpt)
    kw = dict(t_test=inf["t_test"], gate=inf["gate"], use_was=inf["use_was"], seed=seed,
              target=tuple(inf["target_size"]), cross_layers=cfg["optimization"]["cross_layers"],
              self_layers=cfg["optimization"]["self_layers"])
    patch = inf["patch"]
    for name in names:
        path = os.path.join(args.images, name)
        stem = os.path.splitext(name)[0]
        stem = stem[:-4] if stem.endswith(".img") else stem
        image = read_image(path)
        if patch and image.shape[:2] == (patch["image_size"],) * 2:
            res = segment_patched(image, emb, backbone, patch=patch["size"], layout=patch.get("layout", 4),
                                  image_size=patch["image_size"], **kw)
        else:
            res = segment(image, emb, backbone, **kw)
        write_mask(res.labels, os.path.join(args.out, f"{stem}.mask.png"))
        if args.overlay:
            write_image(render_overlay(image, res), os.path.join(args.out, f"{stem}.overlay.png"))
        _write_json(os.path.join(args.out, f"{stem}.json"), {
            "image": name, "image_sha256": file_digest(path), "checkpoint_sha256": ckpt_digest,
            "class_names": emb.class_names, "gate_passed": res.gate_passed, "provenance": res.provenance})
    print(f"segmented {len(names)} images into {args.out}")
    return 0


def _parse_seeds(text, default):
    if text is None:
        return list(default)
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got {text!r}") from None


def cmd_evaluate(args):
    cfg = _config(args)
    header, _ = read_checkpoint(args.ckpt)
    backbone = _checkpoint_backbone(header, cfg, explicit=bool(args.backbone))
    emb = load_embeddings(args.ckpt, backbone)
    test_dir = args.test or cfg["data"]["test"]
    test = _load_dir(test_dir, emb.class_names, "test samples")
    seeds = _parse_seeds(args.seeds, cfg["seeds"])
    report = run_evaluation(cfg, emb, backbone, test, seeds, args.name or os.path.basename(args.ckpt))
    report.manifests.append({"checkpoint_sha256": file_digest(args.ckpt), "seeds": seeds,
                             "test": _sample_digests(test_dir, test), "inference": cfg["inference"]})
    rep_dir = _write_reports(args.out, [report], "report")
    print(f"average mIoU {report.average_mean:.4f} over {len(seeds)} seed(s); reports in {rep_dir}")
    return 0


def load_grid(path):
    """Grid file: mapping of config key (dotted or bare) -> list of values."""
    if not os.path.exists(path):
        raise ConfigurationError(f"grid file not found: {path}")
    with open(path) as f:
        try:
            grid = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{path}: not valid YAML/JSON ({e})") from None
    grid = grid or {}
    if not isinstance(grid, dict):
        raise ConfigurationError(f"{path}: grid must map keys to lists of values")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"grid axis {key!r} must be a non-empty list")
        cfglib.key_paths(key)
    return grid


def grid_points(grid):
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def point_label(point):
    if not point:
        return "baseline"
    return ", ".join(f"{k}={json.dumps(v) if not isinstance(v, str) else v}" for k, v in point.items())


def cmd_ablate(args):
    base = _config(args)
    grid = load_grid(args.grid)
    points = grid_points(grid)
    configs = []
    for point in points:
        cfg = base
        for k, v in point.items():
            cfg = cfglib.set_key(cfg, k, v)
        configs.append(cfg)
    train_dir = args.train or base["data"]["train"]
    test_dir = args.test or base["data"]["test"] or train_dir
    if not train_dir:
        raise ConfigurationError("--train is required (or data.train in the config)")
    seeds = _parse_seeds(args.seeds, base["seeds"])
    reports = []
    for i, (point, cfg) in enumerate(zip(points, configs)):
        run_dir = os.path.join(args.out, "runs", f"{i:03d}")
        os.makedirs(run_dir, exist_ok=True)
        ckpt = os.path.join(run_dir, "embeddings.ckpt")
        result, backbone = run_optimization(cfg, train_dir, args.val or cfg["data"]["val"], ckpt)
        test = _load_dir(test_dir, result.embeddings.class_names, "test samples")
        report = run_evaluation(cfg, result.embeddings, backbone, test, seeds, point_label(point))
        report.manifests.append({"point": point, "run_dir": os.path.relpath(run_dir, args.out),
                                 "checkpoint_sha256": file_digest(ckpt), "seeds": seeds})
        _write_reports(run_dir, [report], "report")
        reports.append(report)
        print(f"[{i + 1}/{len(points)}] {point_label(point)}: mIoU {report.average_mean:.4f}")
    _write_json(os.path.join(args.out, "grid.json"), {"grid": grid, "points": points, "base_config": base})
    rep_dir = _write_reports(args.out, reports, "ablation")
    print(f"ablation tables in {rep_dir}")
    return 0


# ---- parser -----------------------------------------------------------------

def _add_backbone_flags(p):
    p.add_argument("--config", help="run config (YAML or JSON); defaults to the published setting")
    p.add_argument("--backbone", choices=["toy", "sd21"], help="override backbone.name")
    p.add_argument("--backbone-seed", type=int, help="override backbone.seed (toy backbone only)")


def build_parser():
    parser = argparse.ArgumentParser(prog="partseg", description="One-shot part segmentation with diffusion attention.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="crop/convert a raw dataset into the sample layout")
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, choices=[1, 10], help="also draw a 1- or 10-sample train/val/test split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="celeba: only the first N images")
    p.add_argument("--overlap", type=float, default=0.05, help="pascal: max box overlap fraction")
    p.add_argument("--overlap-denominator", choices=["own", "union"], default="own")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write synthetic annotated samples")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["two_region", "multi_region"], default="two_region")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="optimize class embeddings on annotated samples")
    _add_backbone_flags(p)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("segment", help="segment images with a checkpoint")
    _add_backbone_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="mIoU of a checkpoint on a test set")
    _add_backbone_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test")
    p.add_argument("--seeds", help="comma-separated inference seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="optimize + evaluate over a grid of config overrides")
    _add_backbone_flags(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except PartSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
