"""Percentile clipping, foreground z-scoring and spacing resampling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .volume import LabelMask, ProbMap, Volume


@dataclass(frozen=True)
class PreprocessStats:
    p_low: float
    p_high: float
    fg_mean: float
    fg_std: float

    def __post_init__(self):
        if not self.p_low <= self.p_high:
            raise ValueError(f"p_low {self.p_low} > p_high {self.p_high}")
        if not self.fg_std >= 0:
            raise ValueError(f"fg_std must be >= 0, got {self.fg_std}")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "PreprocessStats":
        with open(path) as fh:
            raw = json.load(fh)
        missing = {"p_low", "p_high", "fg_mean", "fg_std"} - set(raw)
        if missing:
            raise ValueError(f"{path}: stats missing keys {sorted(missing)}")
        return cls(float(raw["p_low"]), float(raw["p_high"]),
                   float(raw["fg_mean"]), float(raw["fg_std"]))


def percentile(values: np.ndarray, q: float) -> float:
    """Inclusive linear-interpolation percentile, ``h = (n - 1) * q / 100``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("percentile of empty data")
    if not 0 <= q <= 100:
        raise ValueError(f"q must be in [0, 100], got {q}")
    h = (x.size - 1) * q / 100.0
    lo = int(math.floor(h))
    hi = min(lo + 1, x.size - 1)
    part = np.partition(x, (lo, hi))
    a, b = part[lo], part[hi]
    return float(a + (b - a) * (h - lo))


def compute_stats(
    training_volumes: Sequence[Volume],
    fg_masks: Sequence[LabelMask],
    low_q: float = 0.5,
    high_q: float = 99.5,
    foreground: str = "label",
) -> PreprocessStats:
    """Dataset-pooled clipping percentiles and foreground mean/std.

    ``foreground="label"`` uses voxels with nonzero ground truth;
    ``"above_low"`` uses every voxel strictly above ``p_low``.
    """
    if len(training_volumes) == 0:
        raise ValueError("compute_stats needs at least one volume")
    if foreground == "label" and len(fg_masks) != len(training_volumes):
        raise ValueError("need one mask per volume")
    if foreground not in ("label", "above_low"):
        raise ValueError(f"unknown foreground mode {foreground!r}")

    pooled = np.concatenate([np.asarray(v.data, np.float64).ravel() for v in training_volumes])
    p_low = percentile(pooled, low_q)
    p_high = percentile(pooled, high_q)

    fg = []
    for i, v in enumerate(training_volumes):
        x = np.clip(np.asarray(v.data, np.float64), p_low, p_high)
        if foreground == "label":
            m = fg_masks[i]
            if m.shape != v.shape:
                raise ValueError(f"mask {i} shape {m.shape} != volume shape {v.shape}")
            fg.append(x[m.data != 0])
        else:
            fg.append(x[np.asarray(v.data) > p_low])
    fg = np.concatenate(fg)
    if fg.size == 0:
        raise ValueError("no foreground voxels in the training set")
    return PreprocessStats(p_low, p_high, float(fg.mean()), float(fg.std()))


def compute_stats_per_case(volumes, masks, **kw) -> list[PreprocessStats]:
    """Per-patient alternative to the pooled statistics."""
    return [compute_stats([v], [m], **kw) for v, m in zip(volumes, masks)]


def clip_and_normalize(v: Volume, s: PreprocessStats) -> Volume:
    if not s.fg_std > 0:
        raise ValueError("fg_std must be > 0 to normalize")
    x = np.clip(np.asarray(v.data, np.float64), s.p_low, s.p_high)
    return v.with_data(((x - s.fg_mean) / s.fg_std).astype(np.float32))


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be > 0, got {target_spacing}")
    out = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing))
    return out


def _axis_coords(n_out: int, spacing: float, target: float, n_in: int) -> np.ndarray:
    # output voxel i sits at origin + i * target -> input index i * target / spacing
    c = np.arange(n_out, dtype=np.float64) * (target / spacing)
    return np.clip(c, 0.0, n_in - 1)


def _linear_along(x: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    i0 = np.floor(coords).astype(np.intp)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    t = coords - i0
    shape = [1] * x.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + (b - a) * t


def resample(v: Volume, target_spacing) -> Volume:
    """Trilinear resampling to ``target_spacing``; origin kept, edges clamped."""
    target = tuple(float(t) for t in target_spacing)
    out_shape = resampled_shape(v.shape, v.spacing, target)
    if out_shape == v.shape and target == v.spacing:
        return v
    x = np.asarray(v.data, np.float64)
    for ax in range(3):
        coords = _axis_coords(out_shape[ax], v.spacing[ax], target[ax], v.shape[ax])
        x = _linear_along(x, coords, ax)
    return Volume(x.astype(np.float32), target, v.origin)


def resample_labels(m: LabelMask, target_spacing) -> LabelMask:
    """Nearest-neighbour resampling of a label mask."""
    target = tuple(float(t) for t in target_spacing)
    out_shape = resampled_shape(m.shape, m.spacing, target)
    if out_shape == m.shape and target == m.spacing:
        return m
    idx = []
    for ax in range(3):
        coords = _axis_coords(out_shape[ax], m.spacing[ax], target[ax], m.shape[ax])
        idx.append(np.minimum(np.floor(coords + 0.5).astype(np.intp), m.shape[ax] - 1))
    return LabelMask(m.data[np.ix_(*idx)], target, m.origin)


def resample_to_shape(m: LabelMask, shape, spacing, origin) -> LabelMask:
    """Nearest-neighbour map of ``m`` onto an explicit target grid."""
    idx = []
    for ax in range(3):
        world = origin[ax] + np.arange(shape[ax]) * spacing[ax]
        c = (world - m.origin[ax]) / m.spacing[ax]
        idx.append(np.clip(np.floor(c + 0.5).astype(np.intp), 0, m.shape[ax] - 1))
    return LabelMask(m.data[np.ix_(*idx)], spacing, origin)


def resample_probs_to_shape(p: ProbMap, shape, spacing, origin) -> ProbMap:
    """Linear map of each class channel onto an explicit grid, renormalised per voxel."""
    x = np.asarray(p.data, np.float64)
    for ax in range(3):
        world = origin[ax] + np.arange(shape[ax]) * spacing[ax]
        c = np.clip((world - p.origin[ax]) / p.spacing[ax], 0.0, p.shape[ax] - 1)
        x = _linear_along(x, c, ax + 1)
    x /= x.sum(axis=0, keepdims=True)
    return ProbMap(x.astype(np.float32), spacing, origin)
