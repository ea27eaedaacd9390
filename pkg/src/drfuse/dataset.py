"""Corpus ingestion, manifest handling, hybrid merging and stratified splits.

A corpus is a directory tree with one subdirectory per severity grade.
Manifests are line-delimited text files (path, label, source, split) with a
small header block carrying the seed and provenance, so they diff cleanly.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

# Canonical grade names, alphabetical. This ordering is used everywhere a
# class index is needed (model outputs, confusion matrices).
GRADES = ("Mild", "Moderate", "No_DR", "Proliferative_DR", "Severe")

CORPUS_IDS = ("aptos2019", "ddr", "eyepacs", "idrid", "messidor2", "retino", "synthetic")

# Directory names commonly seen in the public corpora, mapped onto the
# canonical grades. Per-corpus overrides can extend this.
DEFAULT_ALIASES = {
    "mild": "Mild",
    "mild_dr": "Mild",
    "moderate": "Moderate",
    "moderate_dr": "Moderate",
    "no_dr": "No_DR",
    "nodr": "No_DR",
    "normal": "No_DR",
    "proliferative_dr": "Proliferative_DR",
    "proliferate_dr": "Proliferative_DR",
    "pdr": "Proliferative_DR",
    "severe": "Severe",
    "severe_dr": "Severe",
}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

MANIFEST_MAGIC = "# drfuse-manifest v1"


class DatasetError(ValueError):
    """Raised for invalid corpus trees, manifests or split requests."""


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: str
    source: str
    split: str = "unassigned"

    def __post_init__(self):
        if self.label not in GRADES:
            raise DatasetError(f"unknown grade {self.label!r}")
        if self.split not in ("train", "val", "test", "unassigned"):
            raise DatasetError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord] = field(default_factory=list)
    provenance: str = ""
    seed: int = 0
    scan_errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise DatasetError(f"duplicate paths in manifest: {dupes[:5]}")

    def __len__(self):
        return len(self.records)

    def subset(self, split):
        return [r for r in self.records if r.split == split]


class ClassDistribution(dict):
    """Per-grade image counts; always carries all five grades as keys."""

    def __init__(self, counts=None):
        super().__init__({g: 0 for g in GRADES})
        if counts:
            for grade, n in counts.items():
                if grade not in GRADES:
                    raise DatasetError(f"unknown grade {grade!r}")
                if n < 0:
                    raise DatasetError(f"negative count for {grade}")
                self[grade] = int(n)

    @property
    def total(self):
        return sum(self.values())


def distribution(manifest, split=None):
    """Count records per grade, optionally restricted to one split."""
    dist = ClassDistribution()
    for rec in manifest.records:
        if split is None or rec.split == split:
            dist[rec.label] += 1
    return dist


def _resolve_grade(dirname, aliases):
    if dirname in GRADES:
        return dirname
    return aliases.get(dirname.lower().replace(" ", "_"))


def _is_readable_image(path):
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_corpus(root, source, aliases=None, exclude=(), validate=True):
    """Build a manifest from a directory-per-grade tree.

    Missing grade directories produce a warning and a zero count; unreadable
    image files are skipped and listed in ``manifest.scan_errors``. ``exclude``
    is a collection of file basenames to drop (e.g. known-unlabeled images).
    """
    if source not in CORPUS_IDS:
        raise DatasetError(f"unknown corpus id {source!r}")
    if not os.path.isdir(root):
        raise DatasetError(f"corpus root {root!r} is not a directory")

    alias_map = dict(DEFAULT_ALIASES)
    if aliases:
        alias_map.update({k.lower(): v for k, v in aliases.items()})
    exclude = set(exclude)

    grade_dirs = {}
    for entry in sorted(os.listdir(root)):
        full = os.path.join(root, entry)
        if os.path.isdir(full):
            grade = _resolve_grade(entry, alias_map)
            if grade is not None:
                grade_dirs[grade] = full

    for grade in GRADES:
        if grade not in grade_dirs:
            log.warning("corpus %s at %s: no directory for grade %s", source, root, grade)

    records = []
    errors = []
    for grade in GRADES:
        if grade not in grade_dirs:
            continue
        for dirpath, _, filenames in os.walk(grade_dirs[grade]):
            for name in sorted(filenames):
                if os.path.splitext(name)[1].lower() not in IMAGE_EXTENSIONS:
                    continue
                if name in exclude:
                    continue
                path = os.path.join(dirpath, name)
                if validate and not _is_readable_image(path):
                    errors.append(path)
                    continue
                records.append(ImageRecord(path=path, label=grade, source=source))

    records.sort(key=lambda r: r.path)
    return DatasetManifest(
        records=records,
        provenance=f"scan:{source}:{root}",
        scan_errors=errors,
    )


def merge(manifests):
    """Union several manifests into one hybrid manifest.

    Per-class counts add up; source tags are preserved. A path appearing in
    two inputs is an error naming both sources.
    """
    if not manifests:
        raise DatasetError("merge needs at least one manifest")
    seen = {}
    records = []
    for m in manifests:
        for rec in m.records:
            if rec.path in seen:
                raise DatasetError(
                    f"duplicate path {rec.path!r} from sources "
                    f"{seen[rec.path]!r} and {rec.source!r}"
                )
            seen[rec.path] = rec.source
            records.append(rec)
    provenance = "merge:" + "+".join(m.provenance or "?" for m in manifests)
    return DatasetManifest(records=records, provenance=provenance)


def split(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """Deterministic per-class stratified train/val/test assignment.

    Each class is shuffled with an RNG keyed by (seed, class index) so the
    assignment is reproducible across machines regardless of record order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DatasetError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")

    by_class = {g: [] for g in GRADES}
    for rec in manifest.records:
        by_class[rec.label].append(rec)

    too_small = [g for g, recs in by_class.items() if 0 < len(recs) < 3]
    if too_small:
        raise DatasetError(f"classes too small for a 3-way split: {too_small}")

    out = []
    for ci, grade in enumerate(GRADES):
        recs = sorted(by_class[grade], key=lambda r: r.path)
        n = len(recs)
        if n == 0:
            continue
        rng = np.random.default_rng([seed, ci])
        order = rng.permutation(n)
        n_test = int(round(ratios[2] * n))
        n_val = int(round(ratios[1] * n))
        n_train = n - n_val - n_test
        for pos, idx in enumerate(order):
            if pos < n_train:
                assignment = "train"
            elif pos < n_train + n_val:
                assignment = "val"
            else:
                assignment = "test"
            out.append(replace(recs[idx], split=assignment))

    out.sort(key=lambda r: r.path)
    return DatasetManifest(records=out, provenance=manifest.provenance, seed=seed)


def save_manifest(manifest, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(MANIFEST_MAGIC + "\n")
        fh.write(f"# seed: {manifest.seed}\n")
        fh.write(f"# provenance: {manifest.provenance}\n")
        for rec in manifest.records:
            fh.write(f"{rec.path}\t{rec.label}\t{rec.source}\t{rec.split}\n")


def load_manifest(path):
    records = []
    seed = 0
    provenance = ""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_MAGIC:
            raise DatasetError(f"{path}: not a manifest file")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# seed:"):
                seed = int(line.split(":", 1)[1])
            elif line.startswith("# provenance:"):
                provenance = line.split(":", 1)[1].strip()
            elif line.startswith("#"):
                continue
            else:
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DatasetError(f"{path}: malformed line {line!r}")
                records.append(ImageRecord(*parts))
    return DatasetManifest(records=records, provenance=provenance, seed=seed)
