"""Voxel-grid data model and the ``.mvol.json`` + raw payload container.

Axis order is (z, y, x) everywhere. A header ``<name>.mvol.json`` points to
a raw little-endian payload stored next to it.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

NUM_CLASSES = 3
LABEL_NAMES = {0: "background", 1: "kidney", 2: "tumor"}
HEADER_SUFFIX = ".mvol.json"

Triple = tuple[float, float, float]


class VolumeFormatError(ValueError):
    """Raised for malformed containers or invariant violations."""


def _triple(values, name: str, cast=float) -> tuple:
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise VolumeFormatError(f"{name} must have 3 components, got {len(t)}")
    return t


def _check_geometry(shape, spacing, origin):
    if any(s < 1 for s in shape):
        raise VolumeFormatError(f"shape components must be >= 1, got {shape}")
    if not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"spacing components must be > 0, got {spacing}")
    if not all(np.isfinite(origin)):
        raise VolumeFormatError(f"origin must be finite, got {origin}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity field (float32) with spacing and origin in mm."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3D, got ndim={data.ndim}")
        spacing = _triple(self.spacing, "spacing")
        origin = _triple(self.origin, "origin")
        _check_geometry(data.shape, spacing, origin)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Class-ID field: 0 background, 1 kidney, 2 tumor."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise VolumeFormatError(f"label data must be 3D, got ndim={raw.ndim}")
        if raw.size and (raw.min() < 0 or raw.max() >= NUM_CLASSES):
            bad = np.unique(raw[(raw < 0) | (raw >= NUM_CLASSES)])
            raise VolumeFormatError(f"label values outside {{0,1,2}}: {bad[:5].tolist()}")
        if np.issubdtype(raw.dtype, np.floating) and not np.array_equal(raw, np.round(raw)):
            raise VolumeFormatError("label values must be integral")
        spacing = _triple(self.spacing, "spacing")
        origin = _triple(self.origin, "origin")
        _check_geometry(raw.shape, spacing, origin)
        object.__setattr__(self, "data", _freeze(raw.astype(np.uint8)))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "LabelMask":
        return LabelMask(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-voxel class probabilities, data shape (C, z, y, x)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    atol: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise VolumeFormatError(f"prob data must be (C, z, y, x), got ndim={data.ndim}")
        spacing = _triple(self.spacing, "spacing")
        origin = _triple(self.origin, "origin")
        if data.shape[0] < 1:
            raise VolumeFormatError("prob map needs at least one channel")
        _check_geometry(data.shape[1:], spacing, origin)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("prob map contains non-finite values")
        if data.min() < 0 or data.max() > 1:
            raise VolumeFormatError("probabilities must lie in [0, 1]")
        dev = np.abs(data.sum(axis=0, dtype=np.float64) - 1.0).max()
        if dev > self.atol:
            raise VolumeFormatError(f"channel sums deviate from 1 by {dev:.3g}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


AnyVolume = Union[Volume, LabelMask, ProbMap]


def header_path(path) -> Path:
    """Normalise ``foo``, ``foo.raw`` or ``foo.mvol.json`` to the header path."""
    p = Path(path)
    name = p.name
    if name.endswith(HEADER_SUFFIX):
        return p
    if name.endswith(".raw"):
        name = name[: -len(".raw")]
    return p.with_name(name + HEADER_SUFFIX)


def case_name(path) -> str:
    name = Path(path).name
    return name[: -len(HEADER_SUFFIX)] if name.endswith(HEADER_SUFFIX) else Path(path).stem


def write_volume(v: AnyVolume, path) -> Path:
    """Write ``v`` as a header/payload pair; returns the header path."""
    if isinstance(v, Volume):
        kind, payload = "intensity", v.data.astype("<f4")
    elif isinstance(v, LabelMask):
        kind, payload = "label", v.data.astype(np.uint8)
    elif isinstance(v, ProbMap):
        kind, payload = "prob", v.data.astype("<f4")
    else:
        raise TypeError(f"cannot write object of type {type(v).__name__}")

    hdr = header_path(path)
    raw_name = hdr.name[: -len(HEADER_SUFFIX)] + ".raw"
    header = {
        "shape": [int(s) for s in v.shape],
        "spacing_mm": [float(s) for s in v.spacing],
        "origin_mm": [float(o) for o in v.origin],
        "kind": kind,
        "payload": raw_name,
    }
    if kind == "prob":
        header["channels"] = int(v.channels)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    with open(hdr.parent / raw_name, "wb") as fh:
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))
    with open(hdr, "w") as fh:
        json.dump(header, fh, indent=2)
    return hdr


def read_volume(path) -> AnyVolume:
    """Read a container written by :func:`write_volume`."""
    hdr = header_path(path)
    if not hdr.is_file():
        raise FileNotFoundError(f"missing volume header: {hdr}")
    with open(hdr) as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"{hdr}: invalid JSON header ({exc})") from None

    for key in ("shape", "spacing_mm", "origin_mm", "kind", "payload"):
        if key not in header:
            raise VolumeFormatError(f"{hdr}: header missing key '{key}'")
    shape = _triple(header["shape"], "shape", int)
    spacing = _triple(header["spacing_mm"], "spacing_mm")
    origin = _triple(header["origin_mm"], "origin_mm")
    kind = header["kind"]
    if kind not in ("intensity", "label", "prob"):
        raise VolumeFormatError(f"{hdr}: unknown kind {kind!r}")
    if (kind == "prob") != ("channels" in header):
        raise VolumeFormatError(f"{hdr}: 'channels' must be present iff kind is 'prob'")

    payload = hdr.parent / header["payload"]
    if not payload.is_file():
        raise FileNotFoundError(f"missing volume payload: {payload}")
    dtype = np.dtype(np.uint8) if kind == "label" else np.dtype("<f4")
    full_shape = shape if kind != "prob" else (int(header["channels"]),) + shape
    expected = int(np.prod(full_shape))
    nbytes = os.path.getsize(payload)
    if nbytes != expected * dtype.itemsize:
        raise VolumeFormatError(
            f"{payload}: payload holds {nbytes // dtype.itemsize} values, "
            f"header shape {list(full_shape)} needs {expected}"
        )
    data = np.fromfile(payload, dtype=dtype).reshape(full_shape)
    if kind == "intensity":
        return Volume(data, spacing, origin)
    if kind == "label":
        return LabelMask(data, spacing, origin)
    return ProbMap(data, spacing, origin)


def voxel_to_world(v: AnyVolume, index) -> tuple[float, float, float]:
    idx = tuple(int(i) for i in index)
    if len(idx) != 3 or any(i < 0 or i >= n for i, n in zip(idx, v.shape)):
        raise IndexError(f"voxel index {index} outside shape {v.shape}")
    return tuple(o + i * s for o, i, s in zip(v.origin, idx, v.spacing))
