"""Procedural colored-shape dataset with a checkable class rule.

Class ``k`` of ``K`` is the pair (shape ``SHAPES[k % 6]``, hue ``360 k / K``).
The hue rule lets generated images be scored without a learned classifier:
the saturation-weighted circular mean hue of an image picks its class.
Images are float ``[3, H, W]`` in [0, 1]; image ``i`` is rendered from
``default_rng([seed, i])`` so any subset can be regenerated exactly.
"""

from __future__ import annotations

import colorsys

import numpy as np

GENERATOR_VERSION = 1
SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
SAT_THRESHOLD = 0.4
VAL_THRESHOLD = 0.3


def class_rule(k: int, num_classes: int) -> tuple[str, float]:
    return SHAPES[k % len(SHAPES)], 360.0 * k / num_classes


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def render(label: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    shape, hue = class_rule(label, num_classes)
    bg = rng.uniform(0.05, 0.25)
    img = np.full((3, size, size), bg) + rng.normal(0.0, 0.02, (3, size, size))
    h = ((hue + rng.uniform(-8, 8)) % 360) / 360.0
    color = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)))
    r = rng.uniform(0.25, 0.42) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(shape, size, cx, cy, r)
    img[:, mask] = color[:, None]
    return np.clip(img, 0.0, 1.0)


def make_dataset(count: int, num_classes: int, size: int, seed: int = 0,
                 dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Balanced set: image ``i`` has label ``i % num_classes``."""
    labels = np.arange(count) % num_classes
    images = np.stack([render(int(labels[i]), num_classes, size, np.random.default_rng([seed, i]))
                       for i in range(count)]) if count else np.zeros((0, 3, size, size))
    return images.astype(dtype), labels.astype(np.int64)


def rgb_to_hsv(images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB -> (hue degrees, saturation, value) over ``[..., 3, H, W]``."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    r, g, b = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    safe = np.where(delta == 0, 1.0, delta)
    hue = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    hue = np.where(delta == 0, 0.0, hue * 60.0)
    sat = np.where(mx == 0, 0.0, delta / np.where(mx == 0, 1.0, mx))
    return hue, sat, mx


def dominant_hue(images: np.ndarray) -> np.ndarray:
    """Saturation-weighted circular mean hue per image (NaN when nothing is colorful)."""
    hue, sat, val = rgb_to_hsv(images)
    w = np.where((sat > SAT_THRESHOLD) & (val > VAL_THRESHOLD), sat, 0.0)
    rad = np.deg2rad(hue)
    c = (w * np.cos(rad)).sum(axis=(-2, -1))
    s = (w * np.sin(rad)).sum(axis=(-2, -1))
    out = np.rad2deg(np.arctan2(s, c)) % 360.0
    return np.where(w.sum(axis=(-2, -1)) > 0, out, np.nan)


def classify_by_hue(images: np.ndarray, num_classes: int) -> np.ndarray:
    """Nearest class hue on the circle; -1 for images without colorful pixels."""
    hue = dominant_hue(images)
    centers = 360.0 * np.arange(num_classes) / num_classes
    d = np.abs((hue[..., None] - centers + 180.0) % 360.0 - 180.0)
    pred = np.argmin(np.nan_to_num(d, nan=0.0), axis=-1)
    return np.where(np.isnan(hue), -1, pred)


def pixel_features(images: np.ndarray) -> np.ndarray:
    """Per-image statistics: mean R, G, B and the colorful-pixel fraction."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    _, sat, val = rgb_to_hsv(x)
    frac = ((sat > SAT_THRESHOLD) & (val > VAL_THRESHOLD)).mean(axis=(-2, -1))
    return np.concatenate([x.mean(axis=(-2, -1)), frac[..., None]], axis=-1)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic, Euclidean)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)

    def mean_dist(a, b):
        return float(np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).mean())

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def per_class_energy_distance(feat_a, labels_a, feat_b, labels_b, num_classes: int) -> float:
    vals = []
    for k in range(num_classes):
        a, b = feat_a[labels_a == k], feat_b[labels_b == k]
        if len(a) and len(b):
            vals.append(energy_distance(a, b))
    return float(np.mean(vals)) if vals else float("nan")
