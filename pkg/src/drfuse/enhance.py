"""Clip-limited adaptive histogram equalization plus normalize/resize.

The luminance channel (LAB, D65, 8-bit) is divided into a tile grid; each
tile gets a clip-limited histogram and a cumulative mapping, and pixels are
blended between the four surrounding tile mappings. Tiles absorb any
remainder in the last row/column, so no padding is introduced at the fundus
border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

GRAY_LEVELS = 256


class EnhanceError(ValueError):
    pass


@dataclass
class TileGrid:
    rows: int = 8
    cols: int = 8

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise EnhanceError("tile grid needs at least 2x2 tiles for blending")


@dataclass
class ClipSpec:
    """Histogram clip configuration.

    Two parameterizations are accepted: the (alpha, s_max) slope form, and a
    normalized scalar clip limit (the conventional "0.5"). The normalized
    form maps to an effective bin cap of clip*M/N when clip >= N/M, else the
    uniform-histogram floor M/N.
    """

    alpha: float | None = None
    s_max: float | None = None
    normalized_clip: float | None = 0.5

    def beta(self, region_pixels, gray_levels=GRAY_LEVELS):
        m, n = float(region_pixels), float(gray_levels)
        if self.alpha is not None:
            return clip_factor(m, n, self.alpha, self.s_max if self.s_max is not None else 1.0)
        clip = self.normalized_clip
        if clip is None:
            raise EnhanceError("ClipSpec needs either alpha or normalized_clip")
        if clip >= n / m:
            return clip * m / n
        return m / n


def clip_factor(region_pixels, gray_levels, alpha, s_max):
    """Clip limit from region size, level count, clip percentage and max slope."""
    if region_pixels <= 0 or gray_levels <= 0:
        raise EnhanceError("region_pixels and gray_levels must be positive")
    if alpha < 0:
        raise EnhanceError("alpha must be >= 0")
    if s_max < 1:
        raise EnhanceError("s_max must be >= 1")
    return (region_pixels / gray_levels) * (1.0 + (alpha / 100.0) * (s_max - 1.0))


def clip_and_redistribute(hist, beta):
    """Cap histogram bins at the clip limit, spreading excess mass evenly.

    Redistribution iterates until no bin exceeds ceil(beta); the total count
    is preserved exactly.
    """
    hist = np.asarray(hist, dtype=np.int64).copy()
    if np.any(hist < 0):
        raise EnhanceError("histogram bins must be non-negative")
    cap = max(1, math.ceil(beta))
    total = int(hist.sum())
    if cap * len(hist) < total:
        raise EnhanceError(f"cap {cap} over {len(hist)} bins cannot hold {total} counts")

    while True:
        excess = int(np.maximum(hist - cap, 0).sum())
        if excess == 0:
            break
        np.minimum(hist, cap, out=hist)
        below = np.flatnonzero(hist < cap)
        share, rem = divmod(excess, len(below))
        hist[below] += share
        hist[below[:rem]] += 1
    return hist


def tile_mapping(hist, gray_levels=GRAY_LEVELS):
    """Cumulative-histogram grayscale mapping for one tile.

    lut[n] = round((N-1)/M * cumsum(hist)[n]), rounded half-up; monotone by
    construction, with lut[N-1] = N-1.
    """
    hist = np.asarray(hist, dtype=np.float64)
    m = hist.sum()
    if m <= 0:
        raise EnhanceError("tile histogram is empty")
    cdf = np.cumsum(hist)
    lut = np.floor((gray_levels - 1) / m * cdf + 0.5)
    return np.clip(lut, 0, gray_levels - 1).astype(np.int64)


def bilinear_blend(p_old, f_ul, f_ur, f_ll, f_lr, x, y, r, s):
    """Blend the four surrounding tile mappings for one pixel.

    x/y are distances to the upper/lower tile-center rows, r/s to the
    left/right tile-center columns.
    """
    if x + y <= 0 or r + s <= 0:
        raise EnhanceError("degenerate blend weights: x+y and r+s must be positive")
    wy0, wy1 = y / (x + y), x / (x + y)
    left = wy0 * f_ul[p_old] + wy1 * f_ll[p_old]
    right = wy0 * f_ur[p_old] + wy1 * f_lr[p_old]
    return (s / (r + s)) * left + (r / (r + s)) * right


def _tile_edges(extent, tiles):
    base = extent // tiles
    edges = [i * base for i in range(tiles)] + [extent]
    return edges


def _tile_luts(channel, grid, clip):
    """Per-tile LUT array of shape (rows, cols, 256), plus tile centers."""
    h, w = channel.shape
    y_edges = _tile_edges(h, grid.rows)
    x_edges = _tile_edges(w, grid.cols)
    luts = np.empty((grid.rows, grid.cols, GRAY_LEVELS), dtype=np.int64)
    identity = np.arange(GRAY_LEVELS, dtype=np.int64)
    for i in range(grid.rows):
        for j in range(grid.cols):
            tile = channel[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            hist = np.bincount(tile.reshape(-1), minlength=GRAY_LEVELS)
            if np.count_nonzero(hist) <= 1:
                # Constant tile: equalization would produce a hard step and
                # amplify noise, so the mapping stays the identity.
                luts[i, j] = identity
                continue
            beta = clip.beta(tile.size)
            luts[i, j] = tile_mapping(clip_and_redistribute(hist, beta))
    cy = np.array([(y_edges[i] + y_edges[i + 1] - 1) / 2.0 for i in range(grid.rows)])
    cx = np.array([(x_edges[j] + x_edges[j + 1] - 1) / 2.0 for j in range(grid.cols)])
    return luts, cy, cx


def _bracket(coords, centers):
    """Surrounding center indices and blend distances for every coordinate.

    Outside the outermost centers both indices collapse to the edge tile and
    the weights become a pure 0.5/0.5 blend of identical mappings.
    """
    hi = np.searchsorted(centers, coords)
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    near = coords - centers[lo]
    far = centers[hi] - coords
    degenerate = lo == hi
    near = np.where(degenerate, 0.5, near)
    far = np.where(degenerate, 0.5, far)
    return lo, hi, near, far


def equalize_luminance(channel, grid=None, clip=None):
    """Tiled clip-limited equalization of a single 8-bit channel."""
    grid = grid or TileGrid()
    clip = clip or ClipSpec()
    channel = np.asarray(channel)
    if channel.dtype != np.uint8:
        raise EnhanceError("expected an 8-bit channel")
    h, w = channel.shape
    if h < grid.rows or w < grid.cols:
        raise EnhanceError(f"image {h}x{w} too small for a {grid.rows}x{grid.cols} grid")

    luts, cy, cx = _tile_luts(channel, grid, clip)

    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    i0, i1, dist_top, dist_bot = _bracket(ys, cy)
    j0, j1, dist_left, dist_right = _bracket(xs, cx)

    wy0 = (dist_bot / (dist_top + dist_bot))[:, None]
    wx0 = (dist_right / (dist_left + dist_right))[None, :]

    p = channel.astype(np.int64)
    f_ul = luts[i0[:, None], j0[None, :], p]
    f_ll = luts[i1[:, None], j0[None, :], p]
    f_ur = luts[i0[:, None], j1[None, :], p]
    f_lr = luts[i1[:, None], j1[None, :], p]

    blended = wx0 * (wy0 * f_ul + (1 - wy0) * f_ll) + (1 - wx0) * (wy0 * f_ur + (1 - wy0) * f_lr)
    return np.clip(np.floor(blended + 0.5), 0, GRAY_LEVELS - 1).astype(np.uint8)


def clahe(image, grid=None, clip=None):
    """CLAHE on the L channel of an RGB image; A/B are passed through."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise EnhanceError("expected an H x W x 3 color image")
    if image.dtype != np.uint8:
        raise EnhanceError("expected an 8-bit image")
    lab = cv2.cvtColor(image, cv2.COLOR_RGB2LAB)
    lab[:, :, 0] = equalize_luminance(lab[:, :, 0], grid, clip)
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def luminance_std(image):
    """Standard deviation of the L channel; used for contrast reports."""
    lab = cv2.cvtColor(np.asarray(image), cv2.COLOR_RGB2LAB)
    return float(lab[:, :, 0].astype(np.float64).std())


_INTERPOLATION = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
    "cubic": cv2.INTER_CUBIC,
}


def normalize_resize(image, size=128, interpolation="bilinear"):
    """Resize to size x size and scale intensities into [0, 1] (float32)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise EnhanceError("expected an H x W x 3 color image")
    resized = cv2.resize(image, (size, size), interpolation=_INTERPOLATION[interpolation])
    return (resized.astype(np.float32) / 255.0).clip(0.0, 1.0)


class ClaheEnhancer:
    """Estimator-style wrapper: transform() enhances, resizes and normalizes."""

    def __init__(self, rows=8, cols=8, clip=0.5, size=128, interpolation="bilinear"):
        self.rows = rows
        self.cols = cols
        self.clip = clip
        self.size = size
        self.interpolation = interpolation

    def get_params(self, deep=True):
        return {"rows": self.rows, "cols": self.cols, "clip": self.clip,
                "size": self.size, "interpolation": self.interpolation}

    def set_params(self, **params):
        for key, value in params.items():
            if not hasattr(self, key):
                raise ValueError(f"invalid parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X=None, y=None):
        return self

    def transform(self, images):
        grid = TileGrid(self.rows, self.cols)
        clip = ClipSpec(normalized_clip=self.clip)
        out = [
            normalize_resize(clahe(img, grid, clip), self.size, self.interpolation)
            for img in images
        ]
        return np.stack(out)
