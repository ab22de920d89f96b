"""Training-time augmentation applied jointly to image and labels.

Spatial families (rotation, scaling, elastic deformation) are folded into a
single coordinate map and resampled once; gamma and mirroring follow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelMask, Volume


@dataclass
class AugmentConfig:
    rotation_deg: tuple[float, float, float] = (15.0, 15.0, 15.0)
    scale_range: tuple[float, float] = (0.85, 1.25)
    elastic_alpha: tuple[float, float] = (0.0, 200.0)
    elastic_sigma: tuple[float, float] = (9.0, 13.0)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    mirror_axes: tuple[int, ...] = (0, 1, 2)
    p_rotation: float = 0.2
    p_scale: float = 0.2
    p_elastic: float = 0.2
    p_gamma: float = 0.2
    p_mirror: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "elastic_alpha", "elastic_sigma", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {lo} > {hi}")
        if any(r < 0 for r in self.rotation_deg):
            raise ValueError("rotation ranges must be >= 0")
        if self.scale_range[0] <= 0:
            raise ValueError("scale factors must be > 0")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma range must be > 0")
        if self.elastic_alpha[0] < 0 or self.elastic_sigma[0] <= 0:
            raise ValueError("elastic alpha must be >= 0 and sigma > 0")
        for name in ("p_rotation", "p_scale", "p_elastic", "p_gamma", "p_mirror"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ValueError(f"mirror axes must be a subset of (0, 1, 2): {self.mirror_axes}")


def rotation_matrix(angles_deg) -> np.ndarray:
    """Composite rotation Rz @ Ry @ Rx acting on (z, y, x) offsets.

    The angle about an axis rotates the plane of the other two axes; a
    +90 degree turn about z moves (y, x) -> (-x, y), i.e. ``np.rot90`` on
    axes (1, 2).
    """
    az, ay, ax = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))

    def plane(a, i, j):
        r = np.eye(3)
        c, s = np.cos(a), np.sin(a)
        # snap exact quarter turns so 90 degree rotations stay index permutations
        c, s = np.round(c, 15), np.round(s, 15)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        return r

    return plane(az, 1, 2) @ plane(ay, 2, 0) @ plane(ax, 0, 1)


def elastic_field(shape, alpha: float, sigma: float, seed: int) -> np.ndarray:
    """Displacement field (3, *shape): smoothed U(-1, 1) noise times ``alpha``.

    The Gaussian kernel is normalised and non-negative, so |field| <= alpha.
    """
    rng = np.random.default_rng(seed)
    disp = np.empty((3,) + tuple(shape), dtype=np.float64)
    for ax in range(3):
        noise = rng.uniform(-1.0, 1.0, size=shape)
        disp[ax] = ndimage.gaussian_filter(noise, sigma, mode="constant", cval=0.0) * alpha
    return disp


def spatial_coordinates(shape, angles=None, scale=None, displacement=None) -> np.ndarray:
    """Source coordinates for each output voxel, shape (3, *shape).

    Output voxel ``q`` samples the input at ``c + R^T (q - c) / scale + d(q)``,
    with ``c`` the volume centre.
    """
    grid = np.indices(shape, dtype=np.float64)
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    offs = grid - centre[:, None, None, None]
    if angles is not None:
        rot = rotation_matrix(angles)
        offs = np.einsum("ji,j...->i...", rot, offs)  # R^T applied per voxel
    if scale is not None:
        offs = offs / float(scale)
    coords = offs + centre[:, None, None, None]
    if displacement is not None:
        coords = coords + displacement
    return coords


def _warp(v: Volume, m: Optional[LabelMask], coords):
    fill = float(v.data.min())
    img = ndimage.map_coordinates(
        np.asarray(v.data, np.float64), coords, order=1, mode="constant", cval=fill
    )
    out_v = v.with_data(img.astype(np.float32))
    if m is None:
        return out_v, None
    lab = ndimage.map_coordinates(m.data, coords, order=0, mode="constant", cval=0)
    return out_v, m.with_data(lab)


def _is_identity(angles, scale, displacement) -> bool:
    return (
        (angles is None or not np.any(np.asarray(angles)))
        and (scale is None or float(scale) == 1.0)
        and (displacement is None or not np.any(displacement))
    )


def spatial_transform(v, m, angles=None, scale=None, displacement=None):
    if _is_identity(angles, scale, displacement):
        return v, m
    return _warp(v, m, spatial_coordinates(v.shape, angles, scale, displacement))


def rotate(v: Volume, m: LabelMask, angles):
    if not np.all(np.isfinite(angles)):
        raise ValueError(f"rotation angles must be finite: {angles}")
    return spatial_transform(v, m, angles=angles)


def scale(v: Volume, m: LabelMask, factor: float):
    if not factor > 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    return spatial_transform(v, m, scale=factor)


def elastic_deform(v: Volume, m: LabelMask, alpha: float, sigma: float, seed: int):
    if alpha == 0:
        return v, m
    return spatial_transform(v, m, displacement=elastic_field(v.shape, alpha, sigma, seed))


def gamma_correct(v: Volume, gamma: float) -> Volume:
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if gamma == 1.0:
        return v
    x = np.asarray(v.data, np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return v
    u = (x - lo) / (hi - lo)
    return v.with_data((u**gamma * (hi - lo) + lo).astype(np.float32))


def mirror(v: Volume, m: Optional[LabelMask], axes: Sequence[int]):
    axes = tuple(axes)
    if not axes:
        return v, m
    out_v = v.with_data(np.flip(v.data, axis=axes))
    return out_v, (None if m is None else m.with_data(np.flip(m.data, axis=axes)))


@dataclass
class AugmentationPlan:
    """One sampled composite transform; ``None`` fields are skipped."""

    angles: Optional[tuple[float, float, float]] = None
    scale: Optional[float] = None
    elastic: Optional[tuple[float, float, int]] = None  # alpha, sigma, noise seed
    gamma: Optional[float] = None
    mirror_axes: tuple[int, ...] = field(default_factory=tuple)

    @property
    def is_identity(self) -> bool:
        return (self.angles is None and self.scale is None and self.elastic is None
                and self.gamma is None and not self.mirror_axes)

    def __call__(self, v: Volume, m: Optional[LabelMask] = None):
        disp = None
        if self.elastic is not None and self.elastic[0] != 0:
            alpha, sigma, seed = self.elastic
            disp = elastic_field(v.shape, alpha, sigma, seed)
        v, m = spatial_transform(v, m, self.angles, self.scale, disp)
        if self.gamma is not None:
            v = gamma_correct(v, self.gamma)
        return mirror(v, m, self.mirror_axes)


def sample_augmentation(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentationPlan:
    """Draw every family independently; the draw order is fixed for determinism."""
    plan = AugmentationPlan()
    # always consume the same number of draws so one family's probability
    # does not shift another family's parameters
    u = rng.uniform(size=4)
    angles = tuple(float(rng.uniform(-r, r)) for r in cfg.rotation_deg)
    factor = float(rng.uniform(*cfg.scale_range))
    alpha = float(rng.uniform(*cfg.elastic_alpha))
    sigma = float(rng.uniform(*cfg.elastic_sigma))
    noise_seed = int(rng.integers(0, 2**31 - 1))
    gamma = float(rng.uniform(*cfg.gamma_range))
    flips = rng.uniform(size=3)

    if u[0] < cfg.p_rotation:
        plan.angles = angles
    if u[1] < cfg.p_scale:
        plan.scale = factor
    if u[2] < cfg.p_elastic:
        plan.elastic = (alpha, sigma, noise_seed)
    if u[3] < cfg.p_gamma:
        plan.gamma = gamma
    plan.mirror_axes = tuple(a for a in cfg.mirror_axes if flips[a] < cfg.p_mirror)
    return plan


def case_seed(seed: int, case_index: int) -> int:
    return int(seed) ^ int(case_index)
