"""Procedural 10-class 32x32 image set and image file helpers.

Each class is a shape drawn with soft edges over a smooth two-colour
background. Foreground colour, scale, position and rotation are random, so the
label is carried by geometry only.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "diamond",
    "hstripes",
    "vstripes",
    "checker",
    "xcross",
)
N_CLASSES = len(CLASS_NAMES)
IMAGE_SIZE = 32


def _rotate(u, v, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * u + s * v, -s * u + c * v


def _shape_distance(label, u, v, r, phase):
    """Signed distance (negative inside) of shape ``label`` at radius ``r``."""
    if label == 0:
        return np.hypot(u, v) - r
    if label == 1:
        return np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    if label == 2:
        # equilateral triangle, apex up
        k = np.sqrt(3.0)
        d1 = v - 0.5 * r
        d2 = (-k * u - v) / 2 - 0.5 * r
        d3 = (k * u - v) / 2 - 0.5 * r
        return np.maximum(np.maximum(d1, d2), d3) * 1.0
    if label == 3:
        w = 0.3 * r
        arm_h = np.maximum(np.abs(u) - r, np.abs(v) - w)
        arm_v = np.maximum(np.abs(v) - r, np.abs(u) - w)
        return np.minimum(arm_h, arm_v)
    if label == 4:
        return np.abs(np.hypot(u, v) - 0.75 * r) - 0.25 * r
    if label == 5:
        return (np.abs(u) + np.abs(v)) / np.sqrt(2.0) - 0.7 * r
    if label in (6, 7):
        a = v if label == 6 else u
        period = 0.6 * r
        stripe = np.abs(((a / period + phase) % 1.0) - 0.5) * period - 0.25 * period
        box = np.maximum(np.abs(u), np.abs(v)) - r
        return np.maximum(stripe, box)
    if label == 8:
        cell = 0.5 * r
        parity = (np.floor(u / cell + phase) + np.floor(v / cell + phase)) % 2
        box = np.maximum(np.abs(u), np.abs(v)) - r
        return np.where(parity > 0, np.maximum(box, 0.5), box)
    if label == 9:
        w = 0.25 * r
        p, q = _rotate(u, v, np.pi / 4)
        arm_a = np.maximum(np.abs(p) - r, np.abs(q) - w)
        arm_b = np.maximum(np.abs(q) - r, np.abs(p) - w)
        return np.minimum(arm_a, arm_b)
    raise ValueError(f"unknown class {label}")


def render(label, rng, size=IMAGE_SIZE):
    """Render one image of class ``label``; returns float32 (3, size, size) in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    bg_a, bg_b = rng.uniform(0.05, 0.95, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
    background = bg_a[:, None, None] * (1 - ramp) + bg_b[:, None, None] * ramp

    # foreground must contrast with the background mean
    bg_mean = (bg_a + bg_b) / 2
    for _ in range(20):
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - bg_mean).mean() > 0.3:
            break

    r = rng.uniform(0.45, 0.7)
    cx, cy = rng.uniform(-0.9 + r, 0.9 - r, size=2) * 0.8
    theta = 0.0 if label in (6, 7) else rng.uniform(-0.35, 0.35)
    u, v = _rotate(xx - cx, yy - cy, theta)
    dist = _shape_distance(label, u, v, r, rng.uniform())

    edge = 1.5 / size
    alpha = 1.0 / (1.0 + np.exp(np.clip(dist / edge, -50, 50)))
    img = background * (1 - alpha) + fg[:, None, None] * alpha
    img = img + rng.normal(0, 0.006, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_toy_dataset(n, seed=0, size=IMAGE_SIZE):
    """Balanced toy set: ``(images (n, 3, size, size) float32, labels (n,) int64)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % N_CLASSES
    rng.shuffle(labels)
    images = np.stack([render(int(c), rng, size) for c in labels])
    return images, labels.astype(np.int64)


def to_uint8(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def quantize(images):
    """Round to the 8-bit grid that PNG storage uses."""
    return to_uint8(images).astype(np.float32) / 255.0


def save_dataset(path, splits):
    """Write ``{"train": (X, y), "test": (X, y), ...}`` as a compressed npz of uint8 images."""
    arrays = {}
    for name, (images, labels) in splits.items():
        arrays[f"{name}_images"] = to_uint8(images)
        arrays[f"{name}_labels"] = np.asarray(labels, dtype=np.int64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)


def load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with np.load(path) as f:
        names = sorted({k.rsplit("_", 1)[0] for k in f.files})
        return {
            name: (f[f"{name}_images"].astype(np.float32) / 255.0, f[f"{name}_labels"])
            for name in names
        }


def save_png(path, image):
    """``image`` is (3, H, W) in [0, 1]."""
    arr = to_uint8(image).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # explicit settings keep the byte stream reproducible
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()
