"""Command-line interface.

Verbs: prepare, merge, balance, enhance, split, train, evaluate, explain,
run (full pipeline), synth (fixture corpus), report. Exit codes: 0 success,
1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import cv2
import numpy as np

from drfuse import dataset
from drfuse.balance import (
    SmoteConfig,
    balance_class,
    compute_targets,
    flatten_image,
    load_targets_file,
    materialize,
)
from drfuse.dataset import GRADES, DatasetManifest, ImageRecord, distribution
from drfuse.enhance import ClipSpec, TileGrid, clahe, luminance_std, normalize_resize
from drfuse.models import BackboneSpec, build_transfer_model, build_vrfusenet, load_model
from drfuse.pipeline import ConfigError, PipelineConfig, report, run_pipeline
from drfuse.synth import generate_synthetic_corpus
from drfuse.train_eval import (
    TrainConfig,
    evaluate,
    load_split_arrays,
    plot_history,
    save_report,
    train,
)
from drfuse import xai

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STAGE = 2


def _read_rgb(path):
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise ValueError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def cmd_prepare(args):
    manifest = dataset.scan_corpus(args.root, args.corpus, validate=not args.no_validate)
    manifest.seed = args.seed
    dataset.save_manifest(manifest, args.out)
    dist = distribution(manifest)
    for grade in GRADES:
        print(f"{grade}\t{dist[grade]}")
    if manifest.scan_errors:
        print(f"skipped {len(manifest.scan_errors)} unreadable files", file=sys.stderr)
    return EXIT_OK


def cmd_merge(args):
    merged = dataset.merge([dataset.load_manifest(p) for p in args.manifests])
    dataset.save_manifest(merged, args.out)
    print(f"merged {len(args.manifests)} manifests -> {len(merged)} records")
    return EXIT_OK


def cmd_balance(args):
    manifest = dataset.load_manifest(args.manifest)
    policy = "mean" if args.policy == "mean" else load_targets_file(args.policy)
    targets = compute_targets(distribution(manifest), policy)
    by_class = {}
    for rec in manifest.records:
        by_class.setdefault(rec.label, []).append(rec)
    records = list(manifest.records)
    for ci, grade in enumerate(GRADES):
        base = by_class.get(grade, [])
        need = targets[grade] - len(base)
        print(f"{grade}\t{len(base)} -> {targets[grade]}")
        if need <= 0:
            continue
        X = np.stack([
            flatten_image(normalize_resize(_read_rgb(r.path), args.size)) for r in base
        ])
        cfg = SmoteConfig(k=min(args.k, len(base) - 1), seed=[args.seed, ci])
        for i, vec in enumerate(balance_class(X, targets[grade], cfg)):
            path = os.path.join(args.out, grade, f"smote_{i:06d}.png")
            records.append(materialize(vec, (args.size, args.size, 3), path, grade))
    balanced = DatasetManifest(records=sorted(records, key=lambda r: r.path),
                               provenance=f"smote:{manifest.provenance}", seed=args.seed)
    dataset.save_manifest(balanced, os.path.join(args.out, "balanced.manifest"))
    return EXIT_OK


def cmd_enhance(args):
    manifest = dataset.load_manifest(args.manifest)
    rows, cols = (int(v) for v in args.grid.lower().split("x"))
    grid = TileGrid(rows, cols)
    clip = ClipSpec(normalized_clip=args.clip)
    records = []
    report_path = os.path.join(args.out, "contrast.txt")
    os.makedirs(args.out, exist_ok=True)
    with open(report_path, "w") as rep:
        rep.write("path\tl_std_before\tl_std_after\n")
        for i, rec in enumerate(manifest.records):
            img = cv2.resize(_read_rgb(rec.path), (args.size, args.size),
                             interpolation=cv2.INTER_LINEAR)
            out_img = clahe(img, grid, clip)
            out_path = os.path.join(args.out, rec.label, f"{i:06d}.png")
            os.makedirs(os.path.dirname(out_path), exist_ok=True)
            cv2.imwrite(out_path, cv2.cvtColor(out_img, cv2.COLOR_RGB2BGR))
            rep.write(f"{rec.path}\t{luminance_std(img):.3f}\t{luminance_std(out_img):.3f}\n")
            records.append(ImageRecord(path=out_path, label=rec.label, source=rec.source))
    enhanced = DatasetManifest(records=records,
                               provenance=f"clahe:{manifest.provenance}",
                               seed=manifest.seed)
    dataset.save_manifest(enhanced, os.path.join(args.out, "enhanced.manifest"))
    print(f"enhanced {len(records)} images; contrast report at {report_path}")
    return EXIT_OK


def cmd_split(args):
    ratios = tuple(float(v) for v in args.ratios.split(","))
    manifest = dataset.load_manifest(args.manifest)
    assigned = dataset.split(manifest, ratios, args.seed)
    dataset.save_manifest(assigned, args.out)
    for name in ("train", "val", "test"):
        print(f"{name}\t{len(assigned.subset(name))}")
    return EXIT_OK


def _build_model(name, size, seed):
    if name == "vrfusenet":
        return build_vrfusenet(input_size=size, seed=seed)
    return build_transfer_model(BackboneSpec(name), input_size=size, seed=seed)


def cmd_train(args):
    manifest = dataset.load_manifest(args.manifest)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                      epochs=args.epochs, seed=args.seed)
    model = _build_model(args.model, args.size, args.seed)
    X_train, y_train = load_split_arrays(manifest, "train", args.size)
    X_val, y_val = load_split_arrays(manifest, "val", args.size)
    model, history = train(model, (X_train, y_train, X_val, y_val), cfg)
    model.save(args.out)
    plot_history(history, os.path.join(args.out, "history.png"))
    print(f"best val accuracy: {max(history.val_accuracy):.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    model = load_model(args.checkpoint)
    manifest = dataset.load_manifest(args.manifest)
    X_test, y_test = load_split_arrays(manifest, "test", model.input_size)
    rep = evaluate(model, X_test, y_test)
    save_report(rep, args.report, model.label_order)
    print(f"accuracy={rep.accuracy:.4f} precision={rep.precision:.4f} "
          f"recall={rep.recall:.4f} f1={rep.f1:.4f} auc={rep.auc:.4f}")
    return EXIT_OK


def cmd_explain(args):
    model = load_model(args.checkpoint)
    image = normalize_resize(_read_rgb(args.image), model.input_size)
    class_idx = "auto" if args.target == "auto" else model.label_order.index(args.target)
    methods = list(xai.METHODS) if args.method == "all" else [args.method]
    os.makedirs(args.out, exist_ok=True)
    for method in methods:
        hm = xai.compute(method, model, image, class_idx, args.layer)
        xai.save_heatmap_text(hm, os.path.join(args.out, f"{method}.txt"))
        cv2.imwrite(os.path.join(args.out, f"{method}_overlay.png"),
                    cv2.cvtColor(xai.overlay(image, hm), cv2.COLOR_RGB2BGR))
        print(f"{method}: class={model.label_order[hm.class_idx]}")
    grid, cells = xai.comparison_grid({"model": model}, image, methods,
                                      class_idx, args.layer)
    cv2.imwrite(os.path.join(args.out, "grid.png"), cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
    import yaml
    with open(os.path.join(args.out, "cells.yaml"), "w") as fh:
        yaml.safe_dump(cells, fh, sort_keys=False)
    return EXIT_OK


def cmd_run(args):
    cfg = PipelineConfig.from_yaml(args.config)
    record = run_pipeline(cfg)
    print(report(record))
    return EXIT_STAGE if record.failed_stage else EXIT_OK


def cmd_synth(args):
    counts = [int(v) for v in args.counts.split(",")]
    written = generate_synthetic_corpus(args.out, counts, seed=args.seed, size=args.size)
    for grade in GRADES:
        print(f"{grade}\t{written[grade]}")
    return EXIT_OK


def cmd_report(args):
    import yaml
    from drfuse.pipeline import RunRecord
    with open(os.path.join(args.run, "run_record.yaml")) as fh:
        raw = yaml.safe_load(fh)
    record = RunRecord(config=raw["config"], config_hash=raw["config_hash"],
                       version=raw["version"], stage_seconds=raw["stage_seconds"],
                       artifacts=raw["artifacts"], failed_stage=raw["failed_stage"],
                       error=raw["error"])
    print(report(record))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="drfuse",
                                     description="Diabetic-retinopathy grading pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a corpus tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-validate", action="store_true")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("merge", help="merge manifests into a hybrid manifest")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("balance", help="oversample minority classes with SMOTE")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", default="mean",
                   help="'mean' or a path to a grade=count targets file")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_balance)

    p = sub.add_parser("enhance", help="CLAHE + normalize/resize")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", default="8x8")
    p.add_argument("--clip", type=float, default=0.5)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("split", help="stratified train/val/test assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a classifier on a split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default="vrfusenet",
                   choices=["vrfusenet", "vgg16", "vgg19", "resnet50v2",
                            "mobilenetv2", "xception"])
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="full metric report on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("explain", help="CAM-family saliency for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", default="all",
                   choices=["all"] + list(xai.METHODS))
    p.add_argument("--target", default="auto", dest="target",
                   help="'auto' or a grade name", metavar="CLASS")
    p.add_argument("--layer", default="final")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("synth", help="generate the synthetic fixture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="200,200,200,200,200",
                   help="five per-grade counts, canonical grade order")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("report", help="summarize a completed run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # unexpected stage failure
        logging.exception("stage failure")
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
