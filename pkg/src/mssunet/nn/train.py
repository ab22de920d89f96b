"""Patch-based training loop with foreground oversampling and a plateau schedule."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import augment as aug
from .. import loss as L
from ..volume import LabelMask, Volume
from .optim import AdamState, PlateauSchedule, adam_step
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "mean_dice", "lr")


@dataclass
class TrainConfig:
    epochs: int = 60
    iterations_per_epoch: int = 250
    batch_size: int = 2
    patch_shape: tuple[int, int, int] = (32, 32, 32)
    lr: float = 3e-4
    lr_factor: float = 0.2
    lr_patience: int = 30
    stop_patience: int = 50
    fg_oversample: float = 1.0 / 3.0  # 0 gives plain uniform patch origins
    augment: bool = True
    val_count: int = 0  # trailing cases held out for per-epoch validation
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, iterations_per_epoch and batch_size must be >= 1")
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ValueError(f"bad patch shape {self.patch_shape}")
        if not 0.0 <= self.fg_oversample <= 1.0:
            raise ValueError("fg_oversample must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.val_count < 0:
            raise ValueError("val_count must be >= 0")


@dataclass
class Case:
    """A preprocessed training pair, padded up to at least the patch size."""

    image: np.ndarray  # float32 (d, h, w)
    labels: np.ndarray  # uint8 (d, h, w)
    fg: dict = field(default_factory=dict)  # class id -> (k, 3) voxel indices

    @classmethod
    def from_pair(cls, v: Volume | np.ndarray, m: LabelMask | np.ndarray, patch) -> "Case":
        image = np.asarray(getattr(v, "data", v), dtype=np.float32)
        labels = np.asarray(getattr(m, "data", m), dtype=np.uint8)
        if image.shape != labels.shape:
            raise ValueError(f"image {image.shape} and labels {labels.shape} differ")
        pad = [(0, max(0, p - n)) for n, p in zip(image.shape, patch)]
        if any(a for _, a in pad):
            image = np.pad(image, pad, mode="constant", constant_values=float(image.min()))
            labels = np.pad(labels, pad, mode="constant")
        fg = {c: np.argwhere(labels == c) for c in (1, 2)}
        return cls(image, labels, {c: idx for c, idx in fg.items() if len(idx)})


def sample_patch(case: Case, patch, rng: np.random.Generator, force_fg: bool):
    """Crop one patch; with ``force_fg`` it contains a voxel of a random present class."""
    shape = case.image.shape
    if force_fg and case.fg:
        classes = sorted(case.fg)
        cls = classes[int(rng.integers(len(classes)))]
        idx = case.fg[cls]
        voxel = idx[int(rng.integers(len(idx)))]
        origin = [int(np.clip(v - rng.integers(0, p), 0, n - p))
                  for v, p, n in zip(voxel, patch, shape)]
    else:
        origin = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return case.image[sl], case.labels[sl]


def make_batch(cases: Sequence[Case], cfg: TrainConfig, rng: np.random.Generator,
               aug_cfg: Optional[aug.AugmentConfig]):
    """Batch of augmented patches: x (n, 1, d, h, w) float32, y (n, d, h, w) uint8."""
    n = cfg.batch_size
    x = np.empty((n, 1) + tuple(cfg.patch_shape), dtype=np.float32)
    y = np.empty((n,) + tuple(cfg.patch_shape), dtype=np.uint8)
    for i in range(n):
        case = cases[int(rng.integers(len(cases)))]
        force = rng.uniform() < cfg.fg_oversample
        img, lab = sample_patch(case, cfg.patch_shape, rng, force)
        if aug_cfg is not None:
            plan = aug.sample_augmentation(aug_cfg, rng)
            if not plan.is_identity:
                v, m = plan(Volume(img), LabelMask(lab))
                img, lab = v.data, m.data
        x[i, 0] = img
        y[i] = lab
    return x, y


def train_step(net: UNet, x: np.ndarray, y: np.ndarray, loss_cfg: L.LossConfig,
               state: AdamState, lr: float) -> float:
    trace = net.forward(x, "train")
    total, seeds, _ = L.multiscale_loss(trace, y, loss_cfg)
    grads = net.backward(trace, seeds)
    adam_step(net.params, grads, state, lr)
    return float(total)


def _centre_patch(case: Case, patch):
    """Deterministic validation crop around the foreground centroid."""
    shape = case.image.shape
    fg = np.argwhere(case.labels > 0)
    centre = fg.mean(axis=0) if len(fg) else np.array(shape) / 2
    origin = [int(np.clip(round(c - p / 2), 0, n - p)) for c, p, n in zip(centre, patch, shape)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return case.image[sl], case.labels[sl]


def validate(net: UNet, cases: Sequence[Case], patch, loss_cfg: L.LossConfig):
    """Top-head loss and mean hard Dice (kidney, tumor) over centred validation crops."""
    if not cases:
        return math.nan, math.nan
    x = np.stack([_centre_patch(c, patch)[0] for c in cases])[:, None]
    y = np.stack([_centre_patch(c, patch)[1] for c in cases])
    probs = np.concatenate([net.predict(x[i : i + 1]) for i in range(len(cases))])
    top_cfg = L.LossConfig(**{**loss_cfg.__dict__, "layer_weights": (1.0,)})
    val_loss = L.layer_loss(probs.astype(np.float64), y, top_cfg)
    pred = probs.argmax(axis=1)
    dices = []
    for c in (1, 2):
        a, b = pred == c, y == c
        den = a.sum() + b.sum()
        dices.append(1.0 if den == 0 else 2.0 * np.logical_and(a, b).sum() / den)
    return float(val_loss), float(np.mean(dices))


@dataclass
class TrainResult:
    net: UNet
    history: list[dict]
    stopped_early: bool = False


def train(net_cfg: UNetConfig, dataset, loss_cfg: L.LossConfig = L.LossConfig(),
          cfg: TrainConfig = TrainConfig(), aug_cfg: Optional[aug.AugmentConfig] = None,
          val_dataset=(), net: Optional[UNet] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on ``dataset``: a sequence of (image, labels) pairs, Volume/LabelMask or arrays.

    Every random draw (init, patch choice, augmentation) comes from
    generators seeded by ``cfg.seed``, so single-threaded runs repeat
    bit for bit.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    net_cfg.check_input(cfg.patch_shape)
    cases = [Case.from_pair(v, m, cfg.patch_shape) for v, m in dataset]
    val_cases = [Case.from_pair(v, m, cfg.patch_shape) for v, m in val_dataset]
    if net is None:
        net = build_unet(net_cfg, cfg.seed)
    loss_cfg = loss_cfg.for_heads(len(net_cfg.head_levels))
    if aug_cfg is None and cfg.augment:
        aug_cfg = aug.AugmentConfig(seed=cfg.seed)
    if not cfg.augment:
        aug_cfg = None
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    sched = PlateauSchedule(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.stop_patience)
    lr = cfg.lr
    history = []
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.iterations_per_epoch):
            x, y = make_batch(cases, cfg, rng, aug_cfg)
            losses.append(train_step(net, x, y, loss_cfg, state, lr))
        epoch_loss = float(np.mean(losses))
        val_loss, mean_dice = validate(net, val_cases, cfg.patch_shape, loss_cfg)
        row = {"epoch": epoch, "train_loss": epoch_loss, "val_loss": val_loss,
               "mean_dice": mean_dice, "lr": lr}
        history.append(row)
        log.info("epoch %d loss %.5f val %.5f dice %.4f lr %.2e (%.1fs)", epoch, epoch_loss,
                 val_loss, mean_dice, lr, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
        lr, stop = sched.step(epoch_loss)
        if stop:
            stopped = True
            break
    return TrainResult(net, history, stopped)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [_fmt(row[k]) for k in HISTORY_COLUMNS[1:]])


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def read_history_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"epoch": int(r["epoch"]),
                         **{k: (float(r[k]) if r[k] else math.nan) for k in HISTORY_COLUMNS[1:]}})
    return rows
