"""Connected-component cleanup: at most two kidneys, tumors only where they
touch a kept kidney."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelMask

log = logging.getLogger(__name__)

KIDNEY, TUMOR = 1, 2


@dataclass
class Component:
    id: int
    cls: int
    size: int
    bbox: tuple  # ((z0, z1), (y0, y1), (x0, x1)), half-open


@dataclass
class ComponentLabeling:
    ids: np.ndarray
    components: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.components)

    def sizes(self) -> list[int]:
        return [c.size for c in self.components]


_STRUCTURES = {6: ndimage.generate_binary_structure(3, 1),
               26: ndimage.generate_binary_structure(3, 3)}
for _s in _STRUCTURES.values():
    _s.setflags(write=False)


def neighbourhood(connectivity: int) -> np.ndarray:
    try:
        return _STRUCTURES[connectivity]
    except KeyError:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}") from None


def _as_array(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, LabelMask) else m)


def connected_components(m, class_id: int, connectivity: int = 26) -> ComponentLabeling:
    """Label maximal connected sets of ``class_id`` voxels; ids run 1..K in raster order."""
    if class_id not in (KIDNEY, TUMOR):
        raise ValueError(f"class_id must be 1 or 2, got {class_id}")
    structure = neighbourhood(connectivity)
    data = _as_array(m)
    ids, k = ndimage.label(data == class_id, structure=structure)
    comps = []
    if k:
        sizes = np.bincount(ids.ravel(), minlength=k + 1)
        for i, sl in enumerate(ndimage.find_objects(ids), start=1):
            bbox = tuple((s.start, s.stop) for s in sl)
            comps.append(Component(i, class_id, int(sizes[i]), bbox))
    return ComponentLabeling(ids.astype(np.int32), comps)


def filter_kidneys(m: LabelMask, connectivity: int = 26, second_ratio: float = 0.1,
                   audit: dict | None = None) -> LabelMask:
    """Keep the largest kidney component, and the runner-up if it reaches
    ``second_ratio`` of the largest. Everything else becomes background."""
    lab = connected_components(m, KIDNEY, connectivity)
    data = np.array(m.data)
    if lab.count == 0:
        log.warning("no kidney component found; mask left unchanged")
        if audit is not None:
            audit["kidney"] = {"components": [], "kept": [], "dropped": []}
        return m
    order = sorted(lab.components, key=lambda c: (-c.size, c.id))
    keep = [order[0].id]
    if len(order) > 1 and order[1].size >= second_ratio * order[0].size:
        keep.append(order[1].id)
    drop_mask = (lab.ids > 0) & ~np.isin(lab.ids, keep)
    data[drop_mask] = 0
    if audit is not None:
        audit["kidney"] = {
            "components": [{"id": c.id, "size": c.size} for c in lab.components],
            "kept": keep,
            "dropped": [c.id for c in lab.components if c.id not in keep],
            "second_ratio": second_ratio,
        }
    return m.with_data(data)


def touches(component: np.ndarray, other: np.ndarray, connectivity: int = 26) -> bool:
    """True if any voxel of ``component`` coincides with or neighbours ``other``."""
    grown = ndimage.binary_dilation(other, structure=neighbourhood(connectivity))
    return bool(np.any(grown & component))


def filter_tumors(m: LabelMask, connectivity: int = 26, audit: dict | None = None) -> LabelMask:
    """Drop tumor components with no voxel adjacent to a kidney voxel."""
    lab = connected_components(m, TUMOR, connectivity)
    data = np.array(m.data)
    kidney_zone = ndimage.binary_dilation(data == KIDNEY, structure=neighbourhood(connectivity))
    touching = np.unique(lab.ids[kidney_zone & (lab.ids > 0)])
    keep = [int(i) for i in touching]
    data[(lab.ids > 0) & ~np.isin(lab.ids, keep)] = 0
    if audit is not None:
        audit["tumor"] = {
            "components": [{"id": c.id, "size": c.size} for c in lab.components],
            "kept": keep,
            "dropped": [c.id for c in lab.components if c.id not in keep],
        }
    return m.with_data(data)


def postprocess(m: LabelMask, connectivity: int = 26, second_ratio: float = 0.1,
                audit: dict | None = None) -> LabelMask:
    kept = filter_kidneys(m, connectivity, second_ratio, audit)
    return filter_tumors(kept, connectivity, audit)
