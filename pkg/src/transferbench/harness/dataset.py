"""Procedural class-conditional image generator.

Desk-scale stand-in for a photographic dataset: each class is a (shape, hue,
stripe frequency, stripe orientation) tuple, rendered with per-image jitter
on a noisy background.  The renderer uses only integer comparisons and
float64 multiply/add on exact dyadic uniforms from the SplitMix64 streams,
so any IEEE-754 implementation reproduces the images bit for bit; the full
recipe is spelled out in README.md.

Labels are assigned round-robin (label[i] = i mod classes), so the histogram
is uniform up to one example.
"""

from __future__ import annotations

import numpy as np

from ..rng import Stream

HUES = (
    (0.85, 0.35, 0.15),
    (0.15, 0.45, 0.85),
)
STRIPE_PERIODS = (7, 3)
STRIPE_DIM = 0.55
BG_NOISE = 0.05
MAX_CLASSES = 16


class DatasetError(Exception):
    pass


def render_image(seed: int, index: int, label: int, size: int) -> np.ndarray:
    """One (3, size, size) image in [0, 1]."""
    shape_bit = label & 1
    hue_bit = (label >> 1) & 1
    freq_bit = (label >> 2) & 1
    orient_bit = (label >> 3) & 1

    geo = Stream(seed, "img", index, "geom")
    jit = size // 10
    cx = size // 2 + geo.integers(-jit, jit + 1)
    cy = size // 2 + geo.integers(-jit, jit + 1)
    r_lo, r_hi = (size * 22) // 100, (size * 32) // 100
    radius = geo.integers(r_lo, r_hi + 1)
    period = STRIPE_PERIODS[freq_bit]
    phase = geo.integers(0, period)

    base = 0.2 + 0.1 * Stream(seed, "img", index, "bg").uniform()
    noise = Stream(seed, "img", index, "noise").uniform((3, size, size))
    img = base + BG_NOISE * noise

    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    if shape_bit == 0:
        mask = (dy * dy + dx * dx) <= radius * radius
    else:
        mask = np.maximum(np.abs(dy), np.abs(dx)) <= radius

    stripe_coord = yy if orient_bit == 0 else xx
    stripes = np.where(((stripe_coord + phase) // period) % 2 == 0,
                       1.0, STRIPE_DIM)
    hue = HUES[hue_bit]
    for ch in range(3):
        img[ch] = np.where(mask, hue[ch] * stripes + BG_NOISE * noise[ch], img[ch])
    return np.clip(img, 0.0, 1.0)


def gen_dataset(seed: int, n: int, classes: int = 8, canvas_size: int = 40) -> dict:
    """Deterministic dataset: {"images": (n,3,s,s) float64, "labels": (n,)}."""
    if classes < 2:
        raise DatasetError("need at least 2 classes")
    if classes > MAX_CLASSES:
        raise DatasetError(f"at most {MAX_CLASSES} classes are renderable")
    images = np.empty((n, 3, canvas_size, canvas_size))
    labels = np.arange(n, dtype=np.int64) % classes
    for i in range(n):
        images[i] = render_image(seed, i, int(labels[i]), canvas_size)
    return {"images": images, "labels": labels}


def split_dataset(data: dict, train_fraction: float = 0.75) -> dict:
    """Deterministic leading split into train/test halves (data is already
    class-interleaved by round-robin labeling)."""
    n = len(data["images"])
    cut = int(n * train_fraction)
    return {
        "train_x": data["images"][:cut], "train_y": data["labels"][:cut],
        "test_x": data["images"][cut:], "test_y": data["labels"][cut:],
    }
