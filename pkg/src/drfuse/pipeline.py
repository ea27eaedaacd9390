"""End-to-end orchestration driven by a single YAML config.

Stage order: prepare -> merge -> smote -> clahe (+ normalize/resize) ->
split -> train -> evaluate -> explain. Every stage persists its artifacts
under a fixed run-directory layout and is skipped on re-run when its output
already exists, so a run is resumable.

Balancing operates per source corpus within the merged manifest (records
keep their corpus tags), so per-corpus class counts after the smote stage
match the per-corpus target policy.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources

import cv2
import numpy as np
import yaml

from drfuse import __version__, dataset
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
from drfuse.train_eval import (
    TrainConfig,
    evaluate,
    load_split_arrays,
    plot_history,
    save_report,
    train,
)
from drfuse import xai

log = logging.getLogger(__name__)

STAGES = ("prepare", "merge", "smote", "clahe", "split", "train", "evaluate", "explain")

RUN_SUBDIRS = ("config", "manifests", "images", "checkpoints", "reports", "xai")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    corpora: list          # [{root, source, aliases?, exclude?}]
    output_root: str
    seed: int = 0
    image_size: int = 128
    smote_k: int = 5
    smote_policy: str = "mean"        # "mean" or "overrides"
    smote_overrides: dict = field(default_factory=dict)  # source -> targets file
    clahe_rows: int = 8
    clahe_cols: int = 8
    clahe_clip: float = 0.5
    split_ratios: tuple = (0.8, 0.1, 0.1)
    model: str = "vrfusenet"
    train: TrainConfig = field(default_factory=TrainConfig)
    xai_methods: tuple = xai.METHODS
    xai_images: int = 1

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base_dir, p)

        try:
            corpora = [
                {
                    "root": resolve(c["root"]),
                    "source": c["source"],
                    "aliases": c.get("aliases") or {},
                    "exclude": c.get("exclude") or [],
                }
                for c in raw["corpora"]
            ]
            cfg = cls(
                corpora=corpora,
                output_root=resolve(raw["output_root"]),
                seed=int(raw.get("seed", 0)),
                image_size=int(raw.get("image_size", 128)),
                smote_k=int(raw.get("smote", {}).get("k", 5)),
                smote_policy=raw.get("smote", {}).get("policy", "mean"),
                smote_overrides={
                    k: resolve(v)
                    for k, v in (raw.get("smote", {}).get("overrides") or {}).items()
                },
                clahe_rows=int(raw.get("clahe", {}).get("rows", 8)),
                clahe_cols=int(raw.get("clahe", {}).get("cols", 8)),
                clahe_clip=float(raw.get("clahe", {}).get("clip", 0.5)),
                split_ratios=tuple(raw.get("split", (0.8, 0.1, 0.1))),
                model=raw.get("model", "vrfusenet"),
                train=TrainConfig(
                    batch_size=int(raw.get("train", {}).get("batch_size", 128)),
                    learning_rate=float(raw.get("train", {}).get("learning_rate", 1e-5)),
                    epochs=int(raw.get("train", {}).get("epochs", 60)),
                    seed=int(raw.get("seed", 0)),
                ),
                xai_methods=tuple(raw.get("xai", {}).get("methods", xai.METHODS)),
                xai_images=int(raw.get("xai", {}).get("n_images", 1)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key: {exc.args[0]}") from None
        cfg.validate()
        return cfg

    def validate(self):
        for c in self.corpora:
            if not os.path.isdir(c["root"]):
                raise ConfigError(f"corpus root does not exist: {c['root']}")
        for source, path in self.smote_overrides.items():
            if not os.path.isfile(path):
                raise ConfigError(f"targets file for {source} does not exist: {path}")
        if self.smote_policy not in ("mean", "overrides"):
            raise ConfigError(f"unknown smote policy {self.smote_policy!r}")

    def snapshot(self):
        return {
            "corpora": self.corpora,
            "output_root": self.output_root,
            "seed": self.seed,
            "image_size": self.image_size,
            "smote": {"k": self.smote_k, "policy": self.smote_policy,
                      "overrides": self.smote_overrides},
            "clahe": {"rows": self.clahe_rows, "cols": self.clahe_cols,
                      "clip": self.clahe_clip},
            "split": list(self.split_ratios),
            "model": self.model,
            "train": {"batch_size": self.train.batch_size,
                      "learning_rate": self.train.learning_rate,
                      "epochs": self.train.epochs},
            "xai": {"methods": list(self.xai_methods), "n_images": self.xai_images},
        }

    def config_hash(self):
        blob = yaml.safe_dump(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    version: str = __version__
    stage_seconds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(
                {
                    "version": self.version,
                    "config_hash": self.config_hash,
                    "config": self.config,
                    "stage_seconds": self.stage_seconds,
                    "artifacts": self.artifacts,
                    "failed_stage": self.failed_stage,
                    "error": self.error,
                },
                fh,
                sort_keys=False,
            )


def shipped_override_path(source):
    """Path to the packaged per-corpus target override config."""
    ref = resources.files("drfuse") / "data" / "overrides" / f"{source}.cfg"
    if not ref.is_file():
        raise ConfigError(f"no shipped override for corpus {source!r}")
    return str(ref)


def _read_rgb(path):
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise ConfigError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _resize_uint8(img, size):
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)


class PipelineRun:
    def __init__(self, config):
        self.cfg = config
        self.root = config.output_root
        for sub in RUN_SUBDIRS:
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    # ---- stages ----

    def stage_prepare(self):
        paths = []
        for corpus in self.cfg.corpora:
            out = self.path("manifests", f"{corpus['source']}.manifest")
            if not os.path.exists(out):
                m = dataset.scan_corpus(corpus["root"], corpus["source"],
                                        aliases=corpus["aliases"],
                                        exclude=corpus["exclude"])
                m.seed = self.cfg.seed
                dataset.save_manifest(m, out)
            paths.append(out)
        return {"corpus_manifests": paths}

    def stage_merge(self):
        out = self.path("manifests", "hybrid.manifest")
        if not os.path.exists(out):
            manifests = [dataset.load_manifest(p)
                         for p in self.artifacts["corpus_manifests"]]
            merged = dataset.merge(manifests)
            merged.seed = self.cfg.seed
            dataset.save_manifest(merged, out)
        return {"hybrid_manifest": out}

    def stage_smote(self):
        out = self.path("manifests", "balanced.manifest")
        if os.path.exists(out):
            return {"balanced_manifest": out}
        manifest = dataset.load_manifest(self.artifacts["hybrid_manifest"])
        size = self.cfg.image_size
        records = list(manifest.records)
        by_source = {}
        for rec in manifest.records:
            by_source.setdefault(rec.source, []).append(rec)

        for source, recs in sorted(by_source.items()):
            dist = distribution(DatasetManifest(records=recs))
            if self.cfg.smote_policy == "overrides" and source in self.cfg.smote_overrides:
                policy = load_targets_file(self.cfg.smote_overrides[source])
            else:
                policy = "mean"
            targets = compute_targets(dist, policy)
            by_class = {}
            for rec in recs:
                by_class.setdefault(rec.label, []).append(rec)
            for ci, grade in enumerate(GRADES):
                base = by_class.get(grade, [])
                need = targets[grade] - len(base)
                if need <= 0:
                    continue
                X = np.stack([
                    flatten_image(normalize_resize(_read_rgb(r.path), size))
                    for r in base
                ])
                cfg = SmoteConfig(k=min(self.cfg.smote_k, len(base) - 1),
                                  seed=[self.cfg.seed, ci], value_range=(0.0, 1.0))
                synthetic = balance_class(X, targets[grade], cfg)
                for i, vec in enumerate(synthetic):
                    path = self.path("images", "synthetic", source, grade,
                                     f"smote_{i:06d}.png")
                    records.append(materialize(vec, (size, size, 3), path, grade))
        balanced = DatasetManifest(records=sorted(records, key=lambda r: r.path),
                                   provenance=f"smote:{manifest.provenance}",
                                   seed=self.cfg.seed)
        dataset.save_manifest(balanced, out)
        return {"balanced_manifest": out}

    def stage_clahe(self):
        out = self.path("manifests", "enhanced.manifest")
        report_path = self.path("reports", "contrast.txt")
        if os.path.exists(out):
            return {"enhanced_manifest": out, "contrast_report": report_path}
        manifest = dataset.load_manifest(self.artifacts["balanced_manifest"])
        grid = TileGrid(self.cfg.clahe_rows, self.cfg.clahe_cols)
        clip = ClipSpec(normalized_clip=self.cfg.clahe_clip)
        size = self.cfg.image_size
        records = []
        with open(report_path, "w") as rep:
            rep.write("path\tl_std_before\tl_std_after\n")
            for i, rec in enumerate(manifest.records):
                img = _resize_uint8(_read_rgb(rec.path), size)
                enhanced = clahe(img, grid, clip)
                out_path = self.path("images", "enhanced", rec.source, rec.label,
                                     f"{i:06d}.png")
                os.makedirs(os.path.dirname(out_path), exist_ok=True)
                cv2.imwrite(out_path, cv2.cvtColor(enhanced, cv2.COLOR_RGB2BGR))
                rep.write(f"{rec.path}\t{luminance_std(img):.3f}"
                          f"\t{luminance_std(enhanced):.3f}\n")
                records.append(ImageRecord(path=out_path, label=rec.label,
                                           source=rec.source))
        enhanced_manifest = DatasetManifest(records=records,
                                            provenance=f"clahe:{manifest.provenance}",
                                            seed=self.cfg.seed)
        dataset.save_manifest(enhanced_manifest, out)
        return {"enhanced_manifest": out, "contrast_report": report_path}

    def stage_split(self):
        out = self.path("manifests", "split.manifest")
        if not os.path.exists(out):
            manifest = dataset.load_manifest(self.artifacts["enhanced_manifest"])
            assigned = dataset.split(manifest, self.cfg.split_ratios, self.cfg.seed)
            dataset.save_manifest(assigned, out)
        return {"split_manifest": out}

    def _build_model(self):
        if self.cfg.model == "vrfusenet":
            return build_vrfusenet(input_size=self.cfg.image_size, seed=self.cfg.seed)
        return build_transfer_model(BackboneSpec(self.cfg.model),
                                    input_size=self.cfg.image_size, seed=self.cfg.seed)

    def stage_train(self):
        ckpt = self.path("checkpoints", self.cfg.model)
        if os.path.exists(os.path.join(ckpt, "weights.pt")):
            return {"checkpoint": ckpt}
        manifest = dataset.load_manifest(self.artifacts["split_manifest"])
        size = self.cfg.image_size
        X_train, y_train = load_split_arrays(manifest, "train", size)
        X_val, y_val = load_split_arrays(manifest, "val", size)
        model = self._build_model()
        model, history = train(model, (X_train, y_train, X_val, y_val), self.cfg.train)
        model.save(ckpt)
        plot_history(history, self.path("reports", "history.png"))
        return {"checkpoint": ckpt}

    def stage_evaluate(self):
        report_dir = self.path("reports", self.cfg.model)
        if os.path.exists(os.path.join(report_dir, "metrics.txt")):
            return {"report": report_dir}
        manifest = dataset.load_manifest(self.artifacts["split_manifest"])
        model = load_model(self.artifacts["checkpoint"])
        X_test, y_test = load_split_arrays(manifest, "test", self.cfg.image_size)
        report = evaluate(model, X_test, y_test)
        save_report(report, report_dir, model.label_order)
        return {"report": report_dir}

    def stage_explain(self):
        out_dir = self.path("xai")
        grid_path = os.path.join(out_dir, "comparison_grid.png")
        if os.path.exists(grid_path):
            return {"xai_dir": out_dir}
        manifest = dataset.load_manifest(self.artifacts["split_manifest"])
        model = load_model(self.artifacts["checkpoint"])
        test = manifest.subset("test")[: self.cfg.xai_images]
        cell_manifest = []
        for rec in test:
            image = normalize_resize(_read_rgb(rec.path), self.cfg.image_size)
            grid, cells = xai.comparison_grid({self.cfg.model: model}, image,
                                              methods=self.cfg.xai_methods)
            for c in cells:
                c["image"] = rec.path
            cell_manifest.extend(cells)
            for method in self.cfg.xai_methods:
                hm = xai.compute(method, model, image)
                xai.save_heatmap_text(hm, os.path.join(out_dir, f"{method}.txt"))
                cv2.imwrite(os.path.join(out_dir, f"{method}_overlay.png"),
                            cv2.cvtColor(xai.overlay(image, hm), cv2.COLOR_RGB2BGR))
            cv2.imwrite(grid_path, cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
        with open(os.path.join(out_dir, "cells.yaml"), "w") as fh:
            yaml.safe_dump(cell_manifest, fh, sort_keys=False)
        return {"xai_dir": out_dir}

    # ---- driver ----

    def run(self):
        record = RunRecord(config=self.cfg.snapshot(), config_hash=self.cfg.config_hash())
        self.artifacts = record.artifacts
        with open(self.path("config", "config.yaml"), "w") as fh:
            yaml.safe_dump(self.cfg.snapshot(), fh, sort_keys=False)
        for stage in STAGES:
            fn = getattr(self, f"stage_{stage}")
            start = time.time()
            try:
                produced = fn()
            except Exception as exc:
                log.exception("stage %s failed", stage)
                record.failed_stage = stage
                record.error = str(exc)
                break
            record.artifacts.update(produced)
            record.stage_seconds[stage] = round(time.time() - start, 3)
        record.save(self.path("run_record.yaml"))
        return record


def run_pipeline(config):
    """Execute all stages; returns a RunRecord (check failed_stage)."""
    return PipelineRun(config).run()


def report(record):
    """Human-readable run summary: metrics, distributions, artifact paths."""
    lines = [f"drfuse run (config {record.config_hash}, version {record.version})", ""]
    if record.failed_stage:
        lines.append(f"FAILED at stage {record.failed_stage}: {record.error}")
        lines.append("")
    metrics_dir = record.artifacts.get("report")
    if metrics_dir and os.path.exists(os.path.join(metrics_dir, "metrics.txt")):
        lines.append(f"model: {record.config.get('model')}")
        lines.append("metric,value")
        with open(os.path.join(metrics_dir, "metrics.txt")) as fh:
            lines.extend(line.rstrip() for line in fh)
        lines.append("")
    for key in ("hybrid_manifest", "balanced_manifest"):
        path = record.artifacts.get(key)
        if path and os.path.exists(path):
            dist = distribution(dataset.load_manifest(path))
            label = "before balancing" if key == "hybrid_manifest" else "after balancing"
            lines.append(f"class counts {label}:")
            for grade in GRADES:
                lines.append(f"  {grade}: {dist[grade]}")
            lines.append(f"  total: {dist.total}")
            lines.append("")
    lines.append("artifacts:")
    for key, value in record.artifacts.items():
        lines.append(f"  {key}: {value}")
    lines.append(f"stage seconds: {record.stage_seconds}")
    return "\n".join(lines)
