"""Feature-space SMOTE with a mean-of-five-grades target policy.

Images are flattened to feature vectors; each synthetic vector is an
interpolation between a real minority sample and one of its k nearest
neighbours, with a fresh uniform gap per sample. Base points are cycled
round-robin until every class reaches its target count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import cv2
import numpy as np

from drfuse.dataset import GRADES, ClassDistribution, ImageRecord


class BalanceError(ValueError):
    pass


@dataclass
class SmoteConfig:
    k: int = 5
    policy: str | dict = "mean"  # "mean" or an explicit grade -> count map
    seed: int = 0
    value_range: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.k < 1:
            raise BalanceError("k must be >= 1")


def compute_targets(dist, policy="mean"):
    """Per-grade target counts for oversampling.

    The mean policy raises each class to floor(mean of the five counts),
    never below its current count. An explicit map must not undersample.
    """
    dist = ClassDistribution(dist)
    if policy == "mean":
        target = math.floor(sum(dist.values()) / len(GRADES))
        return {g: max(dist[g], target) for g in GRADES}
    if isinstance(policy, dict):
        targets = {}
        for g in GRADES:
            t = int(policy.get(g, dist[g]))
            if t < dist[g]:
                raise BalanceError(
                    f"explicit target {t} for {g} is below current count {dist[g]}; "
                    "this module only oversamples"
                )
            targets[g] = t
        return targets
    raise BalanceError(f"unknown target policy {policy!r}")


def knn(query, pool, k, exclude=None):
    """Indices of the k nearest pool vectors by Euclidean distance.

    Ties break deterministically by ascending index. ``exclude`` removes the
    query's own index from the candidate set.
    """
    pool = np.asarray(pool, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if pool.ndim != 2 or query.shape != pool.shape[1:]:
        raise BalanceError("query/pool dimensionality mismatch")
    candidates = np.arange(len(pool))
    if exclude is not None:
        candidates = candidates[candidates != exclude]
    if len(candidates) < k:
        raise BalanceError(f"pool of {len(candidates)} candidates is smaller than k={k}")
    d = np.linalg.norm(pool[candidates] - query, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return candidates[order]


def smote_sample(x_i, x_zi, delta, value_range=None):
    """Interpolate one synthetic vector between a sample and a neighbour."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_zi = np.asarray(x_zi, dtype=np.float64)
    if x_i.shape != x_zi.shape:
        raise BalanceError(f"dimension mismatch: {x_i.shape} vs {x_zi.shape}")
    if not 0.0 <= delta <= 1.0:
        raise BalanceError(f"delta must be in [0,1], got {delta}")
    x_new = x_i + delta * (x_zi - x_i)
    if value_range is not None:
        x_new = np.clip(x_new, value_range[0], value_range[1])
    return x_new


def balance_class(vectors, target, cfg):
    """Generate (target - len(vectors)) synthetic vectors for one class.

    Neighbour sets are computed once per base point; the base point cycles
    round-robin so synthesis spreads evenly over the class.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise BalanceError("vectors must be a 2-D array (n_samples, n_features)")
    n = len(X)
    if target < n:
        raise BalanceError(f"target {target} below current count {n}")
    if target == n:
        return np.empty((0, X.shape[1]))
    if n <= cfg.k:
        raise BalanceError(
            f"class of size {n} needs more samples than k={cfg.k}; use a smaller k"
        )

    rng = np.random.default_rng(cfg.seed)
    neighbours = np.stack([knn(X[i], X, cfg.k, exclude=i) for i in range(n)])

    out = np.empty((target - n, X.shape[1]))
    for s in range(target - n):
        i = s % n
        zi = neighbours[i, rng.integers(cfg.k)]
        delta = rng.uniform(0.0, 1.0)
        out[s] = smote_sample(X[i], X[zi], delta, cfg.value_range)
    return out


def balance_distribution(class_vectors, cfg):
    """Run balance_class over every grade given the configured target policy.

    ``class_vectors`` maps grade -> (n, d) array. Returns a grade -> synthetic
    array map; the per-class RNG stream is keyed by (seed, class index) so
    classes can be generated independently or in parallel.
    """
    dist = ClassDistribution({g: len(v) for g, v in class_vectors.items()})
    targets = compute_targets(dist, cfg.policy)
    synthetic = {}
    for ci, grade in enumerate(GRADES):
        if grade not in class_vectors:
            continue
        # Per-class stream keyed by (seed, class index): classes are
        # independent, so generation order or parallelism cannot change results.
        class_cfg = SmoteConfig(k=cfg.k, policy=cfg.policy, seed=[cfg.seed, ci],
                                value_range=cfg.value_range)
        synthetic[grade] = balance_class(class_vectors[grade], targets[grade], class_cfg)
    return synthetic, targets


def flatten_image(image):
    """Image array -> 1-D feature vector (row-major)."""
    return np.asarray(image, dtype=np.float64).reshape(-1)


def materialize(vector, shape, path, label, value_range=(0.0, 1.0)):
    """Reshape a synthetic vector back to an image file.

    Values are scaled from ``value_range`` to 8-bit, so a written image
    round-trips to within one quantization step per channel.
    """
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != int(np.prod(shape)):
        raise BalanceError(f"vector of length {vector.size} does not fit shape {shape}")
    lo, hi = value_range
    scaled = (vector.reshape(shape) - lo) / (hi - lo) * 255.0
    img = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if img.ndim == 3:
        ok = cv2.imwrite(path, cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    else:
        ok = cv2.imwrite(path, img)
    if not ok:
        raise BalanceError(f"failed to write {path}")
    return ImageRecord(path=path, label=label, source="synthetic")


def load_targets_file(path):
    """Read an explicit grade -> count map from a plain-text config file."""
    targets = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            grade, _, count = line.partition("=")
            grade = grade.strip()
            if grade not in GRADES:
                raise BalanceError(f"{path}: unknown grade {grade!r}")
            targets[grade] = int(count)
    return targets


class SmoteBalancer:
    """Estimator-style wrapper: ``fit_resample(X, y)`` balances label counts.

    ``y`` holds grade names; the resampled set appends synthetic rows after
    the originals, in grade order.
    """

    def __init__(self, k=5, policy="mean", seed=0, value_range=(0.0, 1.0)):
        self.k = k
        self.policy = policy
        self.seed = seed
        self.value_range = value_range

    def get_params(self, deep=True):
        return {
            "k": self.k,
            "policy": self.policy,
            "seed": self.seed,
            "value_range": self.value_range,
        }

    def set_params(self, **params):
        for key, value in params.items():
            if not hasattr(self, key):
                raise ValueError(f"invalid parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit_resample(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        cfg = SmoteConfig(k=self.k, policy=self.policy, seed=self.seed,
                          value_range=self.value_range)
        class_vectors = {g: X[y == g] for g in GRADES if np.any(y == g)}
        synthetic, self.targets_ = balance_distribution(class_vectors, cfg)
        parts_X = [X]
        parts_y = [y]
        for grade in GRADES:
            if grade in synthetic and len(synthetic[grade]):
                parts_X.append(synthetic[grade])
                parts_y.append(np.full(len(synthetic[grade]), grade, dtype=y.dtype))
        return np.concatenate(parts_X), np.concatenate(parts_y)
