"""Synthetic 5-class fixture corpus for desk-scale runs.

Each grade gets a distinct color-and-shape signature (separable by a small
CNN), with per-image jitter and noise. Counts can be imbalanced to exercise
the balancing stage.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from drfuse.dataset import GRADES

# grade -> (base RGB color, shape kind)
_SIGNATURES = {
    "Mild": ((200, 60, 40), "circle"),
    "Moderate": ((40, 190, 60), "square"),
    "No_DR": ((50, 80, 210), "stripes"),
    "Proliferative_DR": ((210, 200, 40), "gradient"),
    "Severe": ((190, 50, 190), "cross"),
}


def _draw(grade, size, rng):
    color, shape = _SIGNATURES[grade]
    img = np.zeros((size, size, 3), dtype=np.float64)
    img += rng.uniform(0, 30, size=(1, 1, 3))
    c = np.array(color, dtype=np.float64) + rng.uniform(-20, 20, 3)
    cx = int(size / 2 + rng.integers(-size // 8, size // 8 + 1))
    cy = int(size / 2 + rng.integers(-size // 8, size // 8 + 1))
    r = size // 4 + int(rng.integers(-size // 16, size // 16 + 1))
    if shape == "circle":
        cv2.circle(img, (cx, cy), r, c.tolist(), -1)
    elif shape == "square":
        cv2.rectangle(img, (cx - r, cy - r), (cx + r, cy + r), c.tolist(), -1)
    elif shape == "stripes":
        for y in range(0, size, 8):
            img[y:y + 4, :] = c
    elif shape == "gradient":
        ramp = np.linspace(0.2, 1.0, size)
        img += ramp[:, None, None] * c[None, None, :]
    else:  # cross
        w = max(2, size // 10)
        img[cy - w:cy + w, :] = c
        img[:, cx - w:cx + w] = c
    img += rng.normal(0, 8, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic_corpus(root, per_class, seed=0, size=64):
    """Write a directory-per-grade tree of synthetic PNGs; returns counts.

    ``per_class`` is a grade -> count map or a sequence of five counts in
    canonical grade order.
    """
    if not isinstance(per_class, dict):
        per_class = dict(zip(GRADES, per_class))
    counts = {}
    for ci, grade in enumerate(GRADES):
        n = int(per_class.get(grade, 0))
        if n < 1:
            raise ValueError(f"per-class count for {grade} must be >= 1")
        out_dir = os.path.join(root, grade)
        os.makedirs(out_dir, exist_ok=True)
        rng = np.random.default_rng([seed, ci])
        for i in range(n):
            img = _draw(grade, size, rng)
            cv2.imwrite(os.path.join(out_dir, f"{grade.lower()}_{i:05d}.png"),
                        cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        counts[grade] = n
    return counts
