"""Synthetic abdominal phantoms: ellipsoid kidneys with spherical tumors."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import postprocess as pp
from .volume import LabelMask, Volume, write_volume


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 64, 64)  # z, y, x
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kidney_count: int = 2
    kidney_semi_axes: tuple[tuple[float, float], ...] = ((6.0, 9.0), (7.0, 11.0), (5.0, 8.0))
    tumors_per_kidney: tuple[int, int] = (0, 2)
    min_tumors: int = 1  # per case
    tumor_radius: tuple[float, float] = (3.0, 5.5)
    placement: str = "mixed"  # embedded | attached | mixed
    background: tuple[float, float] = (-50.0, 20.0)  # mean, std
    kidney: tuple[float, float] = (120.0, 15.0)
    tumor: tuple[float, float] = (60.0, 15.0)
    noise_level: float = 1.0  # scales every tissue std; 0 gives noiseless phantoms
    second_kidney_min_ratio: float = 0.3
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kidney_count not in (1, 2):
            raise ValueError("kidney_count must be 1 or 2")
        if self.placement not in ("embedded", "attached", "mixed"):
            raise ValueError(f"unknown placement {self.placement!r}")
        lo, hi = self.tumors_per_kidney
        if not 0 <= lo <= hi <= 2:
            raise ValueError("tumors_per_kidney must satisfy 0 <= lo <= hi <= 2")
        if self.min_tumors > self.kidney_count * hi:
            raise ValueError("min_tumors cannot exceed kidney_count * max tumors per kidney")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        biggest = [hi for _, hi in self.kidney_semi_axes]
        for ax, (n, r) in enumerate(zip(self.shape, biggest)):
            need = 2 * r + 2 + (2 * self.tumor_radius[1] if ax else 0)
            if n < need:
                raise ValueError(f"axis {ax} of size {n} cannot hold a kidney of semi-axis {r}")
        tissues = [self.background, self.kidney, self.tumor]
        for i in range(3):
            for j in range(i + 1, 3):
                (m1, s1), (m2, s2) = tissues[i], tissues[j]
                pooled = np.sqrt((s1 * s1 + s2 * s2) / 2)
                if abs(m1 - m2) < 2 * pooled:
                    raise ValueError("tissue intensity means must be separated by >= 2 pooled stds")


class PlacementError(RuntimeError):
    pass


def _ellipsoid(grid, centre, semi):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, semi)) <= 1.0


def _sphere(grid, centre, radius):
    return sum((g - c) ** 2 for g, c in zip(grid, centre)) <= radius * radius


def _draw_labels(spec: PhantomSpec, rng: np.random.Generator):
    shape = spec.shape
    grid = np.ogrid[: shape[0], : shape[1], : shape[2]]
    labels = np.zeros(shape, dtype=np.uint8)
    kidneys = []
    sides = [-1, 1] if spec.kidney_count == 2 else [int(rng.choice([-1, 1]))]
    for side in sides:
        semi = tuple(float(rng.uniform(lo, hi)) for lo, hi in spec.kidney_semi_axes)
        cz = shape[0] / 2 + rng.uniform(-0.1, 0.1) * shape[0]
        cy = shape[1] / 2 + rng.uniform(-0.1, 0.1) * shape[1]
        cx = shape[2] / 2 + side * shape[2] * rng.uniform(0.22, 0.28)
        centre = (cz, cy, cx)
        kidneys.append((centre, semi))
        labels[_ellipsoid(grid, centre, semi)] = 1

    tumors = []
    for centre, semi in kidneys:
        n_tumors = int(rng.integers(spec.tumors_per_kidney[0], spec.tumors_per_kidney[1] + 1))
        for _ in range(n_tumors):
            r = float(rng.uniform(*spec.tumor_radius))
            mode = spec.placement
            if mode == "mixed":
                mode = "embedded" if rng.uniform() < 0.5 else "attached"
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            if mode == "embedded":
                frac = rng.uniform(0.0, 0.4)
            else:
                frac = 1.0 + 0.4 * r / min(semi)
            t_centre = tuple(c + d * s * frac for c, d, s in zip(centre, direction, semi))
            labels[_sphere(grid, t_centre, r)] = 2
            tumors.append({"centre": [float(c) for c in t_centre], "radius": r, "mode": mode})
    return labels, kidneys, tumors


def _consistent(labels: np.ndarray, spec: PhantomSpec, n_kidneys: int) -> bool:
    """Ground truth must survive postprocessing and keep every kidney whole."""
    mask = LabelMask(labels, spec.spacing)
    comp = pp.connected_components(mask, pp.KIDNEY, 26)
    if comp.count != n_kidneys:
        return False
    if n_kidneys == 2:
        small, big = sorted(comp.sizes())
        if small < spec.second_kidney_min_ratio * big:
            return False
    # nothing may touch the volume border
    border = np.ones_like(labels, dtype=bool)
    border[1:-1, 1:-1, 1:-1] = False
    if np.any(labels[border]):
        return False
    return np.array_equal(pp.postprocess(mask).data, labels)


def generate(spec: PhantomSpec):
    """Return ``(Volume, LabelMask, info)`` for one phantom case."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_retries):
        labels, kidneys, tumors = _draw_labels(spec, rng)
        if len(tumors) >= spec.min_tumors and _consistent(labels, spec, len(kidneys)):
            break
    else:
        raise PlacementError(f"could not place a consistent phantom in {spec.max_retries} tries")

    means = np.array([spec.background[0], spec.kidney[0], spec.tumor[0]])
    stds = np.array([spec.background[1], spec.kidney[1], spec.tumor[1]]) * spec.noise_level
    image = means[labels]
    if spec.noise_level > 0:
        image = image + rng.standard_normal(labels.shape) * stds[labels]
    info = {
        "seed": spec.seed,
        "kidneys": [{"centre": [float(c) for c in k[0]], "semi_axes": list(k[1])} for k in kidneys],
        "tumors": tumors,
    }
    return (Volume(image.astype(np.float32), spec.spacing),
            LabelMask(labels, spec.spacing), info)


def generate_cohort(spec: PhantomSpec, count: int, out_dir, start_index: int = 0,
                    prefix: str = "case") -> list[dict]:
    """Write ``count`` phantom pairs and a manifest; seeds are ``spec.seed ^ index``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(start_index, start_index + count):
        case_spec = replace(spec, seed=spec.seed ^ i)
        vol, lab, info = generate(case_spec)
        name = f"{prefix}_{i:05d}"
        write_volume(vol, out / f"{name}_img")
        write_volume(lab, out / f"{name}_seg")
        entries.append({"case": name, "seed": case_spec.seed, **info})
    manifest = {"spec": asdict(spec), "cases": entries}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return entries
