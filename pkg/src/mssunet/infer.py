"""Sliding-window inference: half-overlapping patches, Gaussian centre
weighting, mirror/noise test-time augmentation."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import LabelMask, ProbMap, Volume

Predictor = Callable[[np.ndarray], np.ndarray]  # (n, 1, d, h, w) -> (n, C, d, h, w)


@dataclass(frozen=True)
class PatchGrid:
    patch: tuple[int, int, int]
    volume: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(max(1, p // 2) for p in self.patch)


@dataclass(frozen=True)
class TtaPolicy:
    mirror_axes: tuple[int, ...] = (0, 1, 2)
    noise_std: float = 0.01
    noise_repeats: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.noise_repeats < 0:
            raise ValueError("noise_repeats must be >= 0")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ValueError(f"mirror axes must be a subset of (0, 1, 2): {self.mirror_axes}")

    def mirror_variants(self) -> list[tuple[int, ...]]:
        axes = tuple(sorted(set(self.mirror_axes)))
        return [c for r in range(len(axes) + 1) for c in itertools.combinations(axes, r)]

    @property
    def variant_count(self) -> int:
        return len(self.mirror_variants()) * (1 + self.noise_repeats)


NO_TTA = TtaPolicy(mirror_axes=(), noise_repeats=0)


def _axis_origins(n: int, p: int) -> list[int]:
    stride = max(1, p // 2)
    last = n - p
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def make_grid(volume_shape, patch_shape) -> PatchGrid:
    vol = tuple(int(v) for v in volume_shape)
    patch = tuple(int(p) for p in patch_shape)
    if len(vol) != 3 or len(patch) != 3:
        raise ValueError("shapes must have three axes")
    if min(vol) < 1 or min(patch) < 1:
        raise ValueError(f"shapes must be positive: volume {vol}, patch {patch}")
    if any(p > v for p, v in zip(patch, vol)):
        raise ValueError(f"patch {patch} exceeds volume {vol}; pad the volume first")
    axes = [_axis_origins(v, p) for v, p in zip(vol, patch)]
    return PatchGrid(patch, vol, tuple(itertools.product(*axes)))


def gaussian_weights(patch_shape, sigma_scale: float = 0.125, floor: float = 1e-3) -> np.ndarray:
    """Separable Gaussian, sigma = sigma_scale * patch size per axis, peak 1."""
    w = np.ones(tuple(patch_shape), dtype=np.float64)
    for ax, n in enumerate(patch_shape):
        centre = (n - 1) / 2.0
        sigma = sigma_scale * n
        d = np.arange(n) - centre
        g = np.exp(-(d * d) / (2 * sigma * sigma))
        shape = [1, 1, 1]
        shape[ax] = n
        w = w * g.reshape(shape)
    w /= w.max()
    return np.maximum(w, floor)


def pad_to_patch(x: np.ndarray, patch_shape):
    """Reflect-pad a 3D array so each axis reaches the patch size.

    Returns the padded array and the slices that crop it back.
    """
    orig = x.shape
    before = [max(0, p - n) // 2 for n, p in zip(orig, patch_shape)]
    after = [max(0, p - n) - b for n, p, b in zip(orig, patch_shape, before)]
    for ax in range(3):
        b, a = before[ax], after[ax]
        while b or a:
            width = [(0, 0)] * 3
            lim = x.shape[ax] - 1
            if lim == 0:
                width[ax] = (b, a)
                x = np.pad(x, width, mode="edge")
                break
            # one reflect pass can add at most n - 1 voxels per side
            width[ax] = (min(b, lim), min(a, lim))
            x = np.pad(x, width, mode="reflect")
            b, a = b - width[ax][0], a - width[ax][1]
    crop = tuple(slice(b, b + n) for b, n in zip(before, orig))
    return x, crop


def accumulate(predictor: Predictor, image: np.ndarray, grid: PatchGrid, tta: TtaPolicy = NO_TTA,
               seed: int = 0, sigma_scale: float = 0.125, batch_size: int = 4,
               num_classes: int = 3):
    """Weighted sums over all patches and TTA variants.

    Returns ``(weighted_prob_sum, weight_sum, prediction_count)``; the first
    is (C, d, h, w), the other two (d, h, w).
    """
    if tuple(image.shape) != grid.volume:
        raise ValueError(f"grid built for {grid.volume}, image is {image.shape}")
    rng = np.random.default_rng(seed)
    weights = gaussian_weights(grid.patch, sigma_scale)
    acc = np.zeros((num_classes,) + image.shape, dtype=np.float64)
    wsum = np.zeros(image.shape, dtype=np.float64)
    count = np.zeros(image.shape, dtype=np.int64)
    pz, py, px = grid.patch

    # work items in a fixed order: origin-major, then mirror variant, then noise repeat
    items = []
    for origin in grid.origins:
        for axes in tta.mirror_variants():
            for rep in range(1 + tta.noise_repeats):
                items.append((origin, axes, rep))
    noises = {}
    for origin, axes, rep in items:
        if rep > 0:
            noises[(origin, axes, rep)] = rng.normal(0.0, tta.noise_std, size=grid.patch)

    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        batch = np.empty((len(chunk), 1) + grid.patch, dtype=np.float32)
        for i, (origin, axes, rep) in enumerate(chunk):
            z, y, x = origin
            patch = image[z : z + pz, y : y + py, x : x + px].astype(np.float64)
            if rep > 0:
                patch = patch + noises[(origin, axes, rep)]
            if axes:
                patch = np.flip(patch, axis=axes)
            batch[i, 0] = patch
        probs = np.asarray(predictor(batch), dtype=np.float64)
        for i, (origin, axes, rep) in enumerate(chunk):
            p = probs[i]
            if axes:
                p = np.flip(p, axis=tuple(a + 1 for a in axes))
            z, y, x = origin
            region = (slice(z, z + pz), slice(y, y + py), slice(x, x + px))
            acc[(slice(None),) + region] += p * weights
            wsum[region] += weights
            count[region] += 1
    return acc, wsum, count


def predict_volume(predictor: Predictor, v: Volume, patch_shape, tta: TtaPolicy = NO_TTA,
                   seed: int = 0, sigma_scale: float = 0.125, batch_size: int = 4,
                   num_classes: int = 3) -> ProbMap:
    """Aggregate patch predictions over the whole (preprocessed) volume."""
    image = np.asarray(v.data, dtype=np.float32)
    padded, crop = pad_to_patch(image, patch_shape)
    grid = make_grid(padded.shape, patch_shape)
    acc, wsum, _ = accumulate(predictor, padded, grid, tta, seed, sigma_scale, batch_size,
                              num_classes)
    assert np.all(wsum > 0), "grid does not cover the volume"
    probs = acc / wsum
    probs /= probs.sum(axis=0, keepdims=True)
    probs = probs[(slice(None),) + crop]
    return ProbMap(probs.astype(np.float32), v.spacing, v.origin)


def argmax_labels(p: ProbMap) -> LabelMask:
    """Most probable class per voxel; ties go to the lower class id."""
    return LabelMask(np.argmax(p.data, axis=0).astype(np.uint8), p.spacing, p.origin)


def network_predictor(net) -> Predictor:
    return net.predict
