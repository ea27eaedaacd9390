"""CAM-family saliency methods over any TrainedModel.

Gradient methods (pooled-gradient, higher-order, location-gated weights)
differentiate the pre-softmax class score; the score-based methods run
masked forward passes on the post-softmax confidence. The core weighting
math operates on plain activation/gradient arrays so it can be checked
against hand-computed oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np
import torch

log = logging.getLogger(__name__)

EPS = 1e-8

METHODS = ("gradcam", "gradcampp", "layercam", "scorecam", "faster_scorecam")


class XaiError(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray  # upsampled, min-max normalized, all entries >= 0
    raw: np.ndarray     # native resolution, post-ReLU, pre-normalization
    method: str
    class_idx: int
    layer: str
    normalized: bool = True


# ---------------------------------------------------------------------------
# core weighting math on (channels, h, w) arrays


def gradcam_map(activations, gradients):
    """Pooled-gradient weighting: alpha_k = mean(grad_k); ReLU(sum alpha_k A_k)."""
    A = np.asarray(activations, dtype=np.float64)
    G = np.asarray(gradients, dtype=np.float64)
    alpha = G.mean(axis=(1, 2))
    return np.maximum((alpha[:, None, None] * A).sum(axis=0), 0.0), alpha


def gradcampp_map(activations, gradients):
    """Higher-order weighting with the exponential-score closed form.

    Second and third derivatives of exp(score) reduce to powers of the first
    derivative, so per-location weights become g^2 / (2 g^2 + sum(A g^3)).
    """
    A = np.asarray(activations, dtype=np.float64)
    G = np.asarray(gradients, dtype=np.float64)
    g2 = G * G
    g3 = g2 * G
    denom = 2.0 * g2 + (A * g3).sum(axis=(1, 2), keepdims=True)
    loc = np.where(np.abs(denom) > EPS, g2 / np.where(np.abs(denom) > EPS, denom, 1.0), 0.0)
    if not np.any(loc):
        log.warning("all location weights vanished (denominator below epsilon)")
    alpha = (loc * np.maximum(G, 0.0)).sum(axis=(1, 2))
    return np.maximum((alpha[:, None, None] * A).sum(axis=0), 0.0), alpha


def layercam_map(activations, gradients):
    """Location-specific gating: ReLU(sum_k ReLU(grad) * A)."""
    A = np.asarray(activations, dtype=np.float64)
    G = np.asarray(gradients, dtype=np.float64)
    return np.maximum((np.maximum(G, 0.0) * A).sum(axis=0), 0.0)


def variance_weights(activations, n_channels):
    """Top-N spatial-variance channel selection with normalized weights."""
    A = np.asarray(activations, dtype=np.float64)
    if not 1 <= n_channels <= len(A):
        raise XaiError(f"n_channels must be in [1, {len(A)}]")
    var = A.reshape(len(A), -1).var(axis=1)
    selected = np.argsort(-var, kind="stable")[:n_channels]
    total = var[selected].sum()
    if total <= 0:
        return selected, np.zeros(n_channels)
    return selected, var[selected] / total


def minmax_norm(arr):
    """Map to [0, 1]; constant inputs normalize to all-zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= EPS:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo + EPS)


# ---------------------------------------------------------------------------
# model plumbing


def _resolve_class(model, image, class_idx):
    if class_idx in (None, "auto"):
        return int(model.predict(image[None])[0].argmax())
    return int(class_idx)


def _activations_and_grads(model, image, class_idx, layer):
    """Layer activations and d(pre-softmax score)/d(activations), (K, h, w)."""
    if layer not in model.cam_layers:
        raise XaiError(f"unknown layer {layer!r}; have {sorted(model.cam_layers)}")
    x = model._to_torch(image[None])
    store = {}

    def hook(module, inputs, output):
        output.retain_grad()
        store["a"] = output

    handle = model.cam_layers[layer].register_forward_hook(hook)
    model.module.eval()
    try:
        logits = model.module.logits(x)
    finally:
        handle.remove()
    model.module.zero_grad(set_to_none=True)
    logits[0, class_idx].backward()
    act = store["a"]
    if act.grad is None:
        raise XaiError(f"layer {layer!r} is not differentiable w.r.t. the class score")
    return act.detach().numpy()[0], act.grad.numpy()[0]


def _finalize(raw, method, class_idx, layer, size):
    up = cv2.resize(raw.astype(np.float64), (size, size), interpolation=cv2.INTER_LINEAR)
    up = np.maximum(up, 0.0)
    return Heatmap(values=minmax_norm(up), raw=raw, method=method,
                   class_idx=class_idx, layer=layer)


# ---------------------------------------------------------------------------
# public methods


def grad_cam(model, image, class_idx=None, layer="final"):
    class_idx = _resolve_class(model, image, class_idx)
    A, G = _activations_and_grads(model, image, class_idx, layer)
    raw, _ = gradcam_map(A, G)
    return _finalize(raw, "gradcam", class_idx, layer, model.input_size)


def grad_cam_pp(model, image, class_idx=None, layer="final"):
    class_idx = _resolve_class(model, image, class_idx)
    A, G = _activations_and_grads(model, image, class_idx, layer)
    raw, _ = gradcampp_map(A, G)
    return _finalize(raw, "gradcampp", class_idx, layer, model.input_size)


def layer_cam(model, image, class_idx=None, layers=("final",)):
    """One heatmap per requested layer."""
    class_idx = _resolve_class(model, image, class_idx)
    maps = []
    for layer in layers:
        A, G = _activations_and_grads(model, image, class_idx, layer)
        raw = layercam_map(A, G)
        maps.append(_finalize(raw, "layercam", class_idx, layer, model.input_size))
    return maps


def score_cam(model, image, class_idx=None, layer="final", baseline=None):
    """Gradient-free channel weighting from masked-input confidence changes.

    Exactly K+1 forward passes: one baseline plus one per channel mask.
    """
    class_idx = _resolve_class(model, image, class_idx)
    A = model.extract_features(image[None], layer=layer)[0].transpose(2, 0, 1)
    if baseline is None:
        baseline = np.zeros_like(image)
    size = model.input_size
    base_score = model.predict(baseline[None])[0, class_idx]

    masked = np.empty((len(A),) + image.shape, dtype=np.float32)
    for k in range(len(A)):
        up = cv2.resize(A[k].astype(np.float64), (size, size), interpolation=cv2.INTER_LINEAR)
        masked[k] = image * minmax_norm(up)[..., None]
    scores = model.predict(masked)[:, class_idx]

    alpha = scores - base_score
    alpha = np.exp(alpha - alpha.max())
    alpha = alpha / alpha.sum()
    raw = np.maximum((alpha[:, None, None] * A).sum(axis=0), 0.0)
    return _finalize(raw, "scorecam", class_idx, layer, size)


def faster_score_cam(model, image, class_idx=None, layer="final", n_channels=10):
    """Variance-weighted combination of the top-N highest-variance channels."""
    class_idx = _resolve_class(model, image, class_idx)
    A = model.extract_features(image[None], layer=layer)[0].transpose(2, 0, 1)
    n_channels = min(n_channels, len(A))
    selected, weights = variance_weights(A, n_channels)
    raw = np.maximum((weights[:, None, None] * A[selected]).sum(axis=0), 0.0)
    return _finalize(raw, "faster_scorecam", class_idx, layer, model.input_size)


def compute(method, model, image, class_idx=None, layer="final", **kwargs):
    if method == "gradcam":
        return grad_cam(model, image, class_idx, layer)
    if method == "gradcampp":
        return grad_cam_pp(model, image, class_idx, layer)
    if method == "layercam":
        return layer_cam(model, image, class_idx, layers=(layer,))[0]
    if method == "scorecam":
        return score_cam(model, image, class_idx, layer, **kwargs)
    if method == "faster_scorecam":
        return faster_score_cam(model, image, class_idx, layer, **kwargs)
    raise XaiError(f"unknown method {method!r}; choose from {METHODS}")


# ---------------------------------------------------------------------------
# rendering and persistence


def overlay(image, heatmap, opacity=0.5):
    """Alpha-blend a colormapped heatmap onto the image, weighted by heat.

    Zero-heat pixels keep the original image regardless of opacity.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.max() <= 1.0:
        img = img * 255.0
    heat = np.asarray(heatmap.values, dtype=np.float64)
    if heat.shape != img.shape[:2]:
        heat = cv2.resize(heat, (img.shape[1], img.shape[0]), interpolation=cv2.INTER_LINEAR)
    colored = cv2.applyColorMap((heat * 255).astype(np.uint8), cv2.COLORMAP_JET)
    colored = cv2.cvtColor(colored, cv2.COLOR_BGR2RGB).astype(np.float64)
    weight = (opacity * heat)[..., None]
    blended = img * (1.0 - weight) + colored * weight
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def comparison_grid(models, image, methods=METHODS, class_idx=None, layer="final"):
    """Rows = models, columns = original + methods. Returns (grid, manifest).

    A failing cell is rendered as a gray placeholder and recorded in the
    manifest with its error message.
    """
    size = next(iter(models.values())).input_size
    original = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rows = []
    manifest = []
    for name, model in models.items():
        cells = [original]
        for method in methods:
            entry = {"model": name, "method": method, "layer": layer}
            try:
                hm = compute(method, model, image, class_idx, layer)
                entry["class"] = model.label_order[hm.class_idx]
                entry["status"] = "ok"
                cells.append(overlay(image, hm))
            except Exception as exc:
                entry["status"] = f"error: {exc}"
                cells.append(np.full((size, size, 3), 128, dtype=np.uint8))
            manifest.append(entry)
        rows.append(np.concatenate(cells, axis=1))
    return np.concatenate(rows, axis=0), manifest


def deletion_score_drop(model, image, heatmap, class_idx, fraction=0.2):
    """Score change when the hottest `fraction` of pixels is zeroed out.

    Positive return value means masking reduced the class score (the
    explanation is deletion-faithful for this image).
    """
    heat = heatmap.values
    k = max(1, int(round(fraction * heat.size)))
    threshold = np.partition(heat.reshape(-1), -k)[-k]
    mask = (heat < threshold)[..., None]
    masked = (image * mask).astype(np.float32)
    before = model.predict(image[None])[0, class_idx]
    after = model.predict(masked[None])[0, class_idx]
    return float(before - after)


def save_heatmap_text(heatmap, path):
    """Portable float grid: one header line, then one row per line."""
    with open(path, "w") as fh:
        h, w = heatmap.values.shape
        fh.write(f"{h} {w} method={heatmap.method} class={heatmap.class_idx} "
                 f"layer={heatmap.layer}\n")
        for row in heatmap.values:
            fh.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def load_heatmap_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        h, w = int(header[0]), int(header[1])
        meta = dict(part.split("=", 1) for part in header[2:])
        values = np.loadtxt(fh)
    values = values.reshape(h, w)
    return Heatmap(values=values, raw=values, method=meta.get("method", "?"),
                   class_idx=int(meta.get("class", -1)), layer=meta.get("layer", "?"))
