"""Synthetic volumetric segmentation data: randomly placed ellipsoids on a
noisy background, one intensity offset per foreground class. Generation is
fully determined by (seed, index) through counter-based Philox streams, so
any sample can be regenerated independently of iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    crop_size: tuple[int, int, int]
    num_classes: int
    in_channels: int = 1
    max_blobs: int = 3
    noise_sigma: float = 0.03
    intensity_step: float = 1.0


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *key))))


def gen_synthetic(spec: SyntheticSpec, seed: int, index: int):
    """Return (volume (C,H,W,D) float32, labels (H,W,D) int64) for sample
    `index` of the stream keyed by `seed`."""
    rng = _stream(seed, 1, index)
    h, w, d = spec.crop_size
    grid = np.stack(
        np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij"), axis=-1
    ).astype(np.float64)
    labels = np.zeros((h, w, d), dtype=np.int64)
    # one ellipsoid per foreground class (so every class is represented in
    # every scan); resampled a few times to avoid overlap, with draw-order
    # priority (last writer wins) as the fallback
    # one ellipsoid per foreground class, each confined to its own slab of
    # the first axis so blobs are disjoint by construction and every class
    # keeps a healthy, un-carved shape
    n_fg = min(spec.num_classes - 1, spec.max_blobs)
    slab = h / n_fg
    for cls in range(1, n_fg + 1):
        r_h = rng.uniform(0.35, 0.46) * slab
        r_w = rng.uniform(0.25, 0.4) * w
        r_d = rng.uniform(0.25, 0.4) * d
        lo = (cls - 1) * slab + r_h
        hi = cls * slab - r_h
        c_h = rng.uniform(lo, max(lo, hi))
        c_w = rng.uniform(0.3 * w, 0.7 * w)
        c_d = rng.uniform(0.3 * d, 0.7 * d)
        inside = (
            np.sum((grid - (c_h, c_w, c_d)) ** 2 / np.array([r_h, r_w, r_d]) ** 2, axis=-1)
            <= 1.0
        )
        labels[inside] = cls
    # intensity is a deterministic function of the final label map, so
    # overlap regions stay consistent with their labels
    volume = labels * spec.intensity_step + rng.normal(0.0, spec.noise_sigma, size=(h, w, d))
    # fixed affine normalization: zero-centered with scan-independent class
    # levels, so the intensity-to-class mapping transfers across scans
    volume -= 0.5 * spec.intensity_step * (spec.num_classes - 1)
    vol = np.broadcast_to(volume, (spec.in_channels, h, w, d)).astype(np.float32)
    return np.ascontiguousarray(vol), labels


def augment(volume: np.ndarray, labels: np.ndarray, seed: int, *key: int):
    """Per-axis mirror flips (p=0.5 each) applied jointly, plus additive
    gaussian noise on the volume only."""
    rng = _stream(seed, 2, *key)
    for axis in range(3):
        if rng.random() < 0.5:
            volume = np.flip(volume, axis=axis + 1)
            labels = np.flip(labels, axis=axis)
    volume = volume + rng.normal(0.0, 0.02, size=volume.shape).astype(volume.dtype)
    return np.ascontiguousarray(volume), np.ascontiguousarray(labels)


def make_batch(spec: SyntheticSpec, seed: int, indices, train: bool, epoch: int = 0):
    """Stack samples `indices` into (N,C,H,W,D) / (N,H,W,D) arrays,
    augmenting when `train`."""
    vols, labs = [], []
    for i in indices:
        v, l = gen_synthetic(spec, seed, i)
        if train:
            v, l = augment(v, l, seed, epoch, i)
        vols.append(v)
        labs.append(l)
    return np.stack(vols), np.stack(labs)
