"""Diabetic-retinopathy grading pipeline.

Corpus ingestion and merging, SMOTE class balancing, CLAHE enhancement,
dual-backbone fusion classification, multi-class evaluation and CAM-family
saliency explanations.
"""

from drfuse.dataset import (
    GRADES,
    ClassDistribution,
    DatasetManifest,
    ImageRecord,
    merge,
    scan_corpus,
    split,
)

__version__ = "0.1.0"

__all__ = [
    "GRADES",
    "ClassDistribution",
    "DatasetManifest",
    "ImageRecord",
    "merge",
    "scan_corpus",
    "split",
    "__version__",
]
