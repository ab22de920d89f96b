"""Weighted cross entropy, Soft Dice and its exponential-logarithmic form,
combined per decoder head and summed with per-head weights.

All functions take probabilities shaped (n, C, d, h, w) and integer labels
shaped (n, d, h, w). Soft Dice sums over the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_LAYER_WEIGHTS = (0.4, 0.2, 0.2, 0.1, 0.1)


@dataclass
class LossConfig:
    gamma: float = 0.3
    dice_weights: tuple[float, float] = (0.4, 0.6)  # kidney, tumor
    ce_weights: tuple[float, float, float] = (0.28, 0.28, 0.44)
    layer_weights: tuple[float, ...] = DEFAULT_LAYER_WEIGHTS
    smooth: float = 1e-5
    clamp_floor: float = 1e-6
    plain_dice: bool = False  # 1 - SD instead of the exp-log transform
    skip_absent: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be nonnegative")
        if not 0 < self.clamp_floor < 1:
            raise ValueError("clamp_floor must lie in (0, 1)")

    def for_heads(self, n_heads: int) -> "LossConfig":
        """Copy whose layer weights fit ``n_heads`` supervised heads."""
        if len(self.layer_weights) == n_heads:
            return self
        d = dict(self.__dict__)
        d["layer_weights"] = default_layer_weights(n_heads, self.layer_weights)
        return LossConfig(**d)


def default_layer_weights(n_heads: int, reference: Sequence[float] = DEFAULT_LAYER_WEIGHTS):
    """The first ``n_heads`` reference weights rescaled to sum to 1.

    Networks shallower than the reference keep the top-down ratios of the
    heads they do have.
    """
    if n_heads < 1:
        raise ValueError("need at least one head")
    if n_heads > len(reference):
        raise ValueError(f"no reference weights for {n_heads} heads")
    w = np.asarray(reference[:n_heads], dtype=np.float64)
    return tuple(float(v) for v in w / w.sum())


# ---------------------------------------------------------------------------
# scalar pieces

def soft_dice(pred: np.ndarray, truth: np.ndarray, smooth: float = 1e-5) -> float:
    """2 sum(p t) + s over sum(p^2) + sum(t^2) + s."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    num = 2.0 * np.sum(pred * truth) + smooth
    den = np.sum(pred * pred) + np.sum(truth * truth) + smooth
    return float(num / den)


def _soft_dice_grad(pred, truth, smooth):
    inter = np.sum(pred * truth)
    den = np.sum(pred * pred) + np.sum(truth * truth) + smooth
    sd = (2.0 * inter + smooth) / den
    grad = (2.0 * truth * den - (2.0 * inter + smooth) * 2.0 * pred) / (den * den)
    return sd, grad


def _exp_log_term(sd: float, gamma: float, floor: float):
    """Value and derivative of (-log sd)^gamma with sd clamped to [floor, 1]."""
    if sd >= 1.0:
        return 0.0, 0.0
    clamped = sd < floor
    s = max(sd, floor)
    t = -np.log(s)
    value = t**gamma
    deriv = 0.0 if clamped else -gamma * t ** (gamma - 1.0) / s
    return float(value), float(deriv)


def exp_log_dice(sd_kidney: float, sd_tumor: float, gamma: float = 0.3,
                 weights=(0.4, 0.6), clamp_floor: float = 1e-6) -> float:
    total = 0.0
    for sd, w in zip((sd_kidney, sd_tumor), weights):
        total += w * _exp_log_term(min(float(sd), 1.0), gamma, clamp_floor)[0]
    return total


def weighted_ce(probs: np.ndarray, labels: np.ndarray, class_weights=(0.28, 0.28, 0.44),
                clamp_floor: float = 1e-6) -> float:
    """Mean over voxels of -w[y] log p[y]."""
    p_true, w = _true_class(probs, labels, class_weights)
    return float(np.mean(-w * np.log(np.maximum(p_true, clamp_floor))))


def _true_class(probs, labels, class_weights):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.intp)
    if probs.ndim != labels.ndim + 1 or probs.shape[:1] + probs.shape[2:] != labels.shape:
        raise ValueError(f"probs {probs.shape} do not match labels {labels.shape}")
    p_true = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return p_true, w


# ---------------------------------------------------------------------------
# per-head loss with gradient

def layer_loss(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    return layer_loss_and_grad(probs, labels, cfg)[0]


def layer_loss_and_grad(probs, labels, cfg: LossConfig = LossConfig()):
    """Loss of one head and its gradient w.r.t. that head's probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.intp)
    grad = np.zeros_like(probs)

    dice_part = 0.0
    for weight, cls in zip(cfg.dice_weights, (1, 2)):
        truth = (labels == cls).astype(np.float64)
        if cfg.skip_absent and not truth.any():
            continue
        sd, dsd = _soft_dice_grad(probs[:, cls], truth, cfg.smooth)
        if cfg.plain_dice:
            value, deriv = 1.0 - sd, -1.0
        else:
            value, deriv = _exp_log_term(min(sd, 1.0), cfg.gamma, cfg.clamp_floor)
        dice_part += weight * value
        grad[:, cls] += weight * deriv * dsd

    p_true, w = _true_class(probs, labels, cfg.ce_weights)
    n_vox = p_true.size
    safe = np.maximum(p_true, cfg.clamp_floor)
    ce = float(np.mean(-w * np.log(safe)))
    g_true = np.where(p_true > cfg.clamp_floor, -w / (n_vox * safe), 0.0)
    onehot_axis = labels[:, None]
    np.put_along_axis(grad, onehot_axis,
                      np.take_along_axis(grad, onehot_axis, axis=1) + g_true[:, None], axis=1)
    return dice_part + ce, grad


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Map d/d(probs) to d/d(logits) through a softmax over axis 1."""
    dot = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - dot)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label pyramid level; coarse voxel i sits on fine voxel factor * i.

    Accepts (d, h, w) or batched (n, d, h, w) arrays; the last three axes
    are spatial.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    if factor == 1:
        return labels
    return labels[..., ::factor, ::factor, ::factor]


def multiscale_loss(side_outputs, labels: np.ndarray, cfg: LossConfig = LossConfig()):
    """Weighted sum of per-head losses.

    ``side_outputs`` is a list of ``(level, probs)`` (or a ForwardTrace);
    head ``level`` is scored against labels downsampled by 2^(level-1) and
    weighted by ``cfg.layer_weights[i]`` in finest-first order. Returns
    ``(total, {level: d total / d logits}, {level: head loss})``.
    """
    heads = list(getattr(side_outputs, "side_outputs", side_outputs))
    if len(heads) != len(cfg.layer_weights):
        raise ValueError(f"{len(heads)} heads but {len(cfg.layer_weights)} layer weights")
    heads.sort(key=lambda t: t[0])
    total = 0.0
    seeds, parts = {}, {}
    for (level, probs), w in zip(heads, cfg.layer_weights):
        lab = downsample_labels(labels, 2 ** (level - 1))
        if lab.shape != probs.shape[:1] + probs.shape[2:]:
            raise ValueError(f"head {level}: labels {lab.shape} vs probs {probs.shape}")
        value, g = layer_loss_and_grad(probs, lab, cfg)
        total += w * value
        parts[level] = value
        seeds[level] = softmax_backward(np.asarray(probs, np.float64), w * g).astype(probs.dtype)
    return total, seeds, parts
