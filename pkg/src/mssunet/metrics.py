"""Per-class overlap metrics, surface Hausdorff distance in mm, cohort summaries."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LABEL_NAMES, LabelMask

METRICS = ("dice", "jaccard", "accuracy", "precision", "recall", "hausdorff_mm")
TABLE_ROWS = ("Dice", "Jaccard", "Accuracy", "Precision", "Recall", "Hausdorff (mm)")
CLASSES = {1: "kidney", 2: "tumor"}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _data(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, LabelMask) else m)


def confusion(pred, truth, class_id: int) -> ConfusionCounts:
    p, t = _data(pred), _data(truth)
    if p.shape != t.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {t.shape}")
    if isinstance(pred, LabelMask) and isinstance(truth, LabelMask):
        if not np.allclose(pred.spacing, truth.spacing):
            raise ValueError(f"spacing mismatch: {pred.spacing} vs {truth.spacing}")
    a, b = p == class_id, t == class_id
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return ConfusionCounts(tp, fp, fn, int(a.size) - tp - fp - fn)


# Both sets empty counts as perfect agreement; any other 0/0 ratio scores 0.

def dice(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def jaccard(c: ConfusionCounts) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (N, 3) of foreground voxels with a background 6-neighbour.

    Voxels on the array border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                   border_value=0)
    return np.argwhere(mask & ~inner)


def hausdorff_mm(pred_surface, truth_surface, spacing) -> float:
    """Symmetric max-min distance (mm) between two voxel-index sets.

    Returns NaN when either set is empty.
    """
    a = np.asarray(pred_surface, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(truth_surface, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    s = np.asarray(spacing, dtype=np.float64)
    a, b = a * s, b * s
    d_ab = cKDTree(b).query(a, k=1)[0].max()
    d_ba = cKDTree(a).query(b, k=1)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class ClassMetrics:
    dice: float
    jaccard: float
    accuracy: float
    precision: float
    recall: float
    hausdorff_mm: float  # NaN when undefined

    @property
    def hausdorff_defined(self) -> bool:
        return not math.isnan(self.hausdorff_mm)


@dataclass
class CaseReport:
    case: str
    kidney: ClassMetrics
    tumor: ClassMetrics

    def rows(self):
        for cls in ("kidney", "tumor"):
            yield {"case": self.case, "class": cls, **asdict(getattr(self, cls))}


def evaluate_case(pred, truth, case: str = "", spacing=None) -> CaseReport:
    if spacing is None:
        spacing = truth.spacing if isinstance(truth, LabelMask) else (1.0, 1.0, 1.0)
    p, t = _data(pred), _data(truth)
    out = {}
    for cid, name in CLASSES.items():
        c = confusion(pred, truth, cid)
        hd = hausdorff_mm(surface_voxels(p == cid), surface_voxels(t == cid), spacing)
        out[name] = ClassMetrics(dice(c), jaccard(c), accuracy(c), precision(c), recall(c), hd)
    return CaseReport(case, out["kidney"], out["tumor"])


def evaluate_cohort(reports: list[CaseReport]) -> dict:
    """Mean, median and quartiles per class and metric; Hausdorff skips undefined cases."""
    summary = {"n_cases": len(reports)}
    for cls in CLASSES.values():
        summary[cls] = {}
        for metric in METRICS:
            vals = np.array([getattr(getattr(r, cls), metric) for r in reports], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                stats = {"mean": None, "median": None, "q1": None, "q3": None, "n": 0}
            else:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                stats = {"mean": float(vals.mean()), "median": float(med),
                         "q1": float(q1), "q3": float(q3), "n": int(vals.size)}
            summary[cls][metric] = stats
    return summary


def format_table(summary: dict) -> str:
    """Cohort means laid out as Metric | Kidney | Tumor."""
    lines = [f"{'Metric':<16}{'Kidney':>10}{'Tumor':>10}"]
    for row, metric in zip(TABLE_ROWS, METRICS):
        cells = []
        for cls in ("kidney", "tumor"):
            v = summary[cls][metric]["mean"]
            fmt = "{:.2f}" if metric == "hausdorff_mm" else "{:.3f}"
            cells.append("n/a" if v is None else fmt.format(v))
        lines.append(f"{row:<16}{cells[0]:>10}{cells[1]:>10}")
    return "\n".join(lines)


def write_reports_csv(reports: list[CaseReport], path) -> None:
    fields = ["case", "class", *METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v)
                            for k, v in row.items()})


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def write_boxplot_svg(reports: list[CaseReport], path) -> None:
    """Box plots of the five bounded metrics, one panel per class."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = METRICS[:5]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, cls in zip(axes, ("kidney", "tumor")):
        data = [[getattr(getattr(r, cls), m) for r in reports] for m in names]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(names) + 1), [n.capitalize() for n in names], rotation=30)
        ax.set_title(f"{cls.capitalize()} segmentation")
        ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


__all__ = [
    "CaseReport", "ClassMetrics", "ConfusionCounts", "LABEL_NAMES", "accuracy", "confusion",
    "dice", "evaluate_case", "evaluate_cohort", "format_table", "hausdorff_mm", "jaccard",
    "precision", "recall", "surface_voxels", "write_boxplot_svg", "write_reports_csv",
    "write_summary_json",
]
