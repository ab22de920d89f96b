"""Directory-level steps: preprocess, train, infer, postprocess, evaluate.

Cases are named by file stem: ``<case>_img`` (intensities), ``<case>_seg``
(ground truth), ``<case>_pred`` (predicted labels) and ``<case>_prob``
(class probabilities), each a ``.mvol.json`` header plus ``.raw`` payload.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from . import postprocess as pp
from . import preprocess as prep
from .config import Config
from .infer import NO_TTA, TtaPolicy, argmax_labels, predict_volume
from .nn.train import TrainResult, train
from .nn.unet import UNet
from .volume import HEADER_SUFFIX, LabelMask, ProbMap, Volume, read_volume, write_volume

log = logging.getLogger(__name__)

IMG, SEG, PRED, PROB = "_img", "_seg", "_pred", "_prob"


def list_cases(directory, suffix: str) -> dict[str, Path]:
    """``{case: header path}`` for every ``<case><suffix>`` container, sorted by case."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"directory not found: {d}")
    tail = suffix + HEADER_SUFFIX
    found = {p.name[: -len(tail)]: p for p in d.iterdir() if p.name.endswith(tail)}
    return dict(sorted(found.items()))


def _read(path, kind):
    v = read_volume(path)
    if not isinstance(v, kind):
        raise ValueError(f"{path}: expected {kind.__name__}, found {type(v).__name__}")
    return v


# -- preprocess ----------------------------------------------------------------

def preprocess_dir(cfg: Config, in_dir, out_dir, stats: prep.PreprocessStats | None = None):
    """Normalise and resample every case; stats are computed unless given (frozen)."""
    pc = cfg.preprocess
    images = list_cases(in_dir, IMG)
    if not images:
        raise FileNotFoundError(f"no '*{IMG}{HEADER_SUFFIX}' volumes in {in_dir}")
    segs = list_cases(in_dir, SEG)
    vols = {c: _read(p, Volume) for c, p in images.items()}
    masks = {c: _read(segs[c], LabelMask) for c in images if c in segs}

    if stats is None:
        labelled = [c for c in images if c in masks]
        if pc.foreground == "label" and not labelled:
            raise ValueError(f"no '*{SEG}' masks in {in_dir} to compute foreground statistics")
        use = labelled if pc.foreground == "label" else list(images)
        stats = prep.compute_stats([vols[c] for c in use], [masks.get(c) for c in use],
                                   pc.low_percentile, pc.high_percentile, pc.foreground)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for case, v in vols.items():
        s = stats
        if pc.per_case:
            s = prep.compute_stats([v], [masks.get(case)], pc.low_percentile,
                                   pc.high_percentile, pc.foreground)
        nv = prep.clip_and_normalize(v, s)
        if pc.target_spacing is not None:
            nv = prep.resample(nv, pc.target_spacing)
        write_volume(nv, out / f"{case}{IMG}")
        if case in masks:
            m = masks[case]
            if pc.target_spacing is not None:
                m = prep.resample_labels(m, pc.target_spacing)
            write_volume(m, out / f"{case}{SEG}")
    return stats


# -- train ---------------------------------------------------------------------

def load_pairs(data_dir) -> list[tuple[str, Volume, LabelMask]]:
    images, segs = list_cases(data_dir, IMG), list_cases(data_dir, SEG)
    cases = [c for c in images if c in segs]
    if not cases:
        raise FileNotFoundError(f"no image/label pairs in {data_dir}")
    return [(c, _read(images[c], Volume), _read(segs[c], LabelMask)) for c in cases]


def train_from_dir(cfg: Config, data_dir, on_epoch=None) -> TrainResult:
    """Train on the preprocessed pairs in ``data_dir``; the last ``train.val_count`` cases validate."""
    pairs = load_pairs(data_dir)
    val_count = cfg.train.val_count
    if val_count >= len(pairs):
        raise ValueError(f"val_count {val_count} leaves no training cases out of {len(pairs)}")
    split = len(pairs) - val_count
    train_set = [(v, m) for _, v, m in pairs[:split]]
    val_set = [(v, m) for _, v, m in pairs[split:]]
    return train(cfg.net, train_set, cfg.loss, cfg.train, cfg.augment, val_set,
                 on_epoch=on_epoch)


def checkpoint_meta(cfg: Config, stats: prep.PreprocessStats) -> dict:
    return {"config": cfg.to_dict(), "stats": asdict(stats)}


# -- infer ---------------------------------------------------------------------

def tta_policy(cfg: Config) -> TtaPolicy:
    ic = cfg.infer
    if ic.tta == "none":
        return replace(NO_TTA, noise_std=ic.noise_std, noise_repeats=ic.noise_repeats)
    return TtaPolicy(ic.mirror_axes, ic.noise_std, ic.noise_repeats)


def infer_case(net: UNet, v: Volume, stats: prep.PreprocessStats, cfg: Config):
    """Predicted labels and probabilities on the geometry of the raw volume ``v``."""
    x = prep.clip_and_normalize(v, stats)
    pc, ic = cfg.preprocess, cfg.infer
    if pc.target_spacing is not None:
        x = prep.resample(x, pc.target_spacing)
    probs = predict_volume(net.predict, x, ic.patch_shape, tta_policy(cfg), ic.seed,
                           ic.sigma_scale, ic.batch_size, net.cfg.num_classes)
    if probs.shape != v.shape or not np.allclose(probs.spacing, v.spacing):
        probs = prep.resample_probs_to_shape(probs, v.shape, v.spacing, v.origin)
    return argmax_labels(probs), probs


def infer_dir(net: UNet, cfg: Config, stats: prep.PreprocessStats, in_dir, out_dir,
              save_probs: bool = False) -> list[str]:
    images = list_cases(in_dir, IMG)
    if not images:
        raise FileNotFoundError(f"no '*{IMG}{HEADER_SUFFIX}' volumes in {in_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for case, path in images.items():
        labels, probs = infer_case(net, _read(path, Volume), stats, cfg)
        write_volume(labels, out / f"{case}{PRED}")
        if save_probs:
            write_volume(probs, out / f"{case}{PROB}")
        log.info("inferred %s", case)
    return list(images)


# -- postprocess ---------------------------------------------------------------

def postprocess_dir(in_dir, out_dir, connectivity: int = 26, second_ratio: float = 0.1,
                    audit_path=None) -> dict:
    preds = list_cases(in_dir, PRED)
    if not preds:
        raise FileNotFoundError(f"no '*{PRED}{HEADER_SUFFIX}' masks in {in_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    audits = {}
    for case, path in preds.items():
        audit = {}
        cleaned = pp.postprocess(_read(path, LabelMask), connectivity, second_ratio, audit)
        write_volume(cleaned, out / f"{case}{PRED}")
        audits[case] = audit
    if audit_path is not None:
        Path(audit_path).write_text(json.dumps(audits, indent=2, sort_keys=True) + "\n")
    return audits


# -- evaluate ------------------------------------------------------------------

def evaluate_dirs(pred_dir, truth_dir, report_out=None, boxplot_out=None, summary_out=None):
    """Score every predicted case against its ground truth; returns ``(reports, summary)``."""
    preds, truths = list_cases(pred_dir, PRED), list_cases(truth_dir, SEG)
    if not preds:
        raise FileNotFoundError(f"no '*{PRED}{HEADER_SUFFIX}' masks in {pred_dir}")
    missing = [c for c in preds if c not in truths]
    if missing:
        raise FileNotFoundError(f"no ground truth in {truth_dir} for cases {missing}")
    reports = [M.evaluate_case(_read(preds[c], LabelMask), _read(truths[c], LabelMask), c)
               for c in preds]
    summary = M.evaluate_cohort(reports)
    if report_out is not None:
        M.write_reports_csv(reports, report_out)
    if summary_out is not None:
        M.write_summary_json(summary, summary_out)
    if boxplot_out is not None:
        M.write_boxplot_svg(reports, boxplot_out)
    return reports, summary


__all__ = [
    "IMG", "PRED", "PROB", "SEG", "checkpoint_meta", "evaluate_dirs", "infer_case", "infer_dir",
    "list_cases", "load_pairs", "postprocess_dir", "preprocess_dir", "train_from_dir",
]
