"""Multi-scale supervised 3D U-Net: graph, initialisation, forward and backward."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops

LAYER_KINDS = (
    "conv",
    "strided-conv-down",
    "transposed-conv-up",
    "instance-norm",
    "leaky-relu",
    "concat-skip",
    "softmax-head",
)


@dataclass
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    max_channels: int = 320
    in_channels: int = 1
    num_classes: int = 3
    deep_supervision: bool = True
    negative_slope: float = 0.01
    norm_eps: float = 1e-5
    kernel_size: int = 3
    dtype: str = "float32"
    # full-size geometry additionally requires the deepest map to be >= 8 per axis
    paper_profile: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** (level - 1), self.max_channels)

    @property
    def head_levels(self) -> tuple[int, ...]:
        """Decoder levels carrying a softmax head, finest first."""
        if not self.deep_supervision:
            return (1,)
        return tuple(range(1, self.levels))

    def check_input(self, spatial) -> None:
        factor = 2 ** (self.levels - 1)
        for n in spatial:
            if n % factor:
                raise ValueError(f"patch axis {n} is not divisible by 2^(levels-1) = {factor}")
            deepest = n // factor
            if deepest < 1 or (self.paper_profile and deepest < 8):
                lim = 8 if self.paper_profile else 1
                raise ValueError(f"deepest feature map axis {deepest} < {lim} for patch axis {n}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    level: int
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1


@dataclass
class ForwardTrace:
    """Side outputs ``(level, probs)`` finest first; probs are (n, 3, d, h, w)."""

    side_outputs: list
    mode: str
    caches: Optional[dict] = field(default=None, repr=False)

    @property
    def top(self) -> np.ndarray:
        return self.side_outputs[0][1]

    @property
    def levels(self) -> list[int]:
        return [lvl for lvl, _ in self.side_outputs]


def _block_specs(prefix, level, cin, cout, k, stride=1, kind="conv"):
    return [
        LayerSpec(f"{prefix}", kind, level, cin, cout, k, stride),
        LayerSpec(f"{prefix}.norm", "instance-norm", level, cout, cout),
        LayerSpec(f"{prefix}.act", "leaky-relu", level, cout, cout),
    ]


def layer_graph(cfg: UNetConfig) -> list[LayerSpec]:
    k, L = cfg.kernel_size, cfg.levels
    layers: list[LayerSpec] = []
    prev = cfg.in_channels
    for lvl in range(1, L + 1):
        c = cfg.channels(lvl)
        if lvl > 1:
            layers += _block_specs(f"enc{lvl}.down", lvl, prev, c, k, 2, "strided-conv-down")
            prev = c
        layers += _block_specs(f"enc{lvl}.conv1", lvl, prev, c, k)
        layers += _block_specs(f"enc{lvl}.conv2", lvl, c, c, k)
        prev = c
    for lvl in range(L - 1, 0, -1):
        c = cfg.channels(lvl)
        layers.append(LayerSpec(f"dec{lvl}.up", "transposed-conv-up", lvl, prev, c, k, 2))
        layers.append(LayerSpec(f"dec{lvl}.concat", "concat-skip", lvl, 2 * c, 2 * c))
        layers += _block_specs(f"dec{lvl}.conv1", lvl, 2 * c, c, k)
        layers += _block_specs(f"dec{lvl}.conv2", lvl, c, c, k)
        if lvl in cfg.head_levels:
            layers.append(LayerSpec(f"head{lvl}", "softmax-head", lvl, c, cfg.num_classes))
        prev = c
    return layers


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in layer_graph(cfg):
        k = spec.kernel
        if spec.kind in ("conv", "strided-conv-down"):
            shapes[spec.name + ".w"] = (spec.out_channels, spec.in_channels, k, k, k)
            shapes[spec.name + ".b"] = (spec.out_channels,)
        elif spec.kind == "transposed-conv-up":
            # adjoint layout: (in_c, out_c, k, k, k)
            shapes[spec.name + ".w"] = (spec.in_channels, spec.out_channels, k, k, k)
            shapes[spec.name + ".b"] = (spec.out_channels,)
        elif spec.kind == "instance-norm":
            shapes[spec.name + ".scale"] = (spec.out_channels,)
            shapes[spec.name + ".shift"] = (spec.out_channels,)
        elif spec.kind == "softmax-head":
            shapes[spec.name + ".w"] = (spec.out_channels, spec.in_channels, 1, 1, 1)
            shapes[spec.name + ".b"] = (spec.out_channels,)
    return shapes


def count_params(cfg: UNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: UNetConfig, seed: int) -> dict[str, np.ndarray]:
    """He (fan-in) normal weights, zero biases, unit norm scale."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = shape[1] * int(np.prod(shape[2:]))
            if ".up." in name:
                fan_in = shape[0] * int(np.prod(shape[2:]))
            std = np.sqrt(2.0 / fan_in) if not name.startswith("head") else np.sqrt(1.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


class UNet:
    """The network: a config, its layer graph and a parameter dict."""

    def __init__(self, cfg: UNetConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.layers = layer_graph(cfg)
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    # -- forward -----------------------------------------------------------

    def _cna(self, name, h, stride, caches):
        p = self.params
        h, c_conv = ops.conv_forward(h, p[name + ".w"], p[name + ".b"], stride)
        h, c_norm = ops.instance_norm_forward(h, p[name + ".norm.scale"], p[name + ".norm.shift"],
                                              self.cfg.norm_eps)
        h, c_act = ops.leaky_relu_forward(h, self.cfg.negative_slope)
        if caches is not None:
            caches[name] = (c_conv, c_norm, c_act)
        return h

    def _cna_backward(self, name, dh, caches, grads):
        c_conv, c_norm, c_act = caches[name]
        dh = ops.leaky_relu_backward(dh, c_act)
        dh, grads[name + ".norm.scale"], grads[name + ".norm.shift"] = ops.instance_norm_backward(dh, c_norm)
        dh, grads[name + ".w"], grads[name + ".b"] = ops.conv_backward(dh, self.params[name + ".w"], c_conv)
        return dh

    def forward(self, x: np.ndarray, mode: str = "train") -> ForwardTrace:
        """Run the network on ``x`` of shape (n, in_c, d, h, w).

        ``train`` evaluates every head and keeps activations for
        :meth:`backward`; ``eval`` evaluates only the full-resolution head.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"input must be (n, {self.cfg.in_channels}, d, h, w), got {x.shape}")
        self.cfg.check_input(x.shape[2:])
        L = self.cfg.levels
        p = self.params
        caches = {} if mode == "train" else None
        h = ops.to_channels_last(x.astype(self.dtype, copy=False))
        skips = {}
        for lvl in range(1, L + 1):
            if lvl > 1:
                h = self._cna(f"enc{lvl}.down", h, 2, caches)
            h = self._cna(f"enc{lvl}.conv1", h, 1, caches)
            h = self._cna(f"enc{lvl}.conv2", h, 1, caches)
            if lvl < L:
                skips[lvl] = h

        wanted = self.cfg.head_levels if mode == "train" else (1,)
        side = []
        for lvl in range(L - 1, 0, -1):
            name = f"dec{lvl}"
            h, c_up = ops.tconv_forward(h, p[name + ".up.w"], p[name + ".up.b"], 2)
            h = np.concatenate([h, skips[lvl]], axis=-1)
            if caches is not None:
                caches[name + ".up"] = c_up
            h = self._cna(name + ".conv1", h, 1, caches)
            h = self._cna(name + ".conv2", h, 1, caches)
            if lvl in wanted:
                logits, c_head = ops.pointwise_forward(h, p[f"head{lvl}.w"], p[f"head{lvl}.b"])
                probs = ops.softmax(logits, axis=-1)
                side.append((lvl, ops.to_channels_first(probs)))
                if caches is not None:
                    caches[f"head{lvl}"] = c_head
        side.sort(key=lambda t: t[0])
        return ForwardTrace(side, mode, caches)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Full-resolution class probabilities (n, 3, d, h, w)."""
        return self.forward(x, mode="eval").top

    # -- backward ----------------------------------------------------------

    def backward(self, trace: ForwardTrace, head_grads: dict) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logits) per head level.

        ``head_grads`` maps level -> array shaped like that head's output
        (n, 3, d, h, w). Levels missing from the dict contribute nothing.
        """
        if trace.mode != "train" or trace.caches is None:
            raise ValueError("backward needs a trace produced by forward(mode='train')")
        unknown = set(head_grads) - set(trace.levels)
        if unknown:
            raise ValueError(f"gradients given for levels without heads: {sorted(unknown)}")
        caches = trace.caches
        L = self.cfg.levels
        p = self.params
        grads: dict[str, np.ndarray] = {}

        dskips = {}
        dh = None
        for lvl in range(1, L):
            name = f"dec{lvl}"
            c = self.cfg.channels(lvl)
            if lvl > 1:
                dh = dh_up
            if f"head{lvl}" in caches:
                g = head_grads.get(lvl)
                x_head = caches[f"head{lvl}"]
                if g is None:
                    g = np.zeros(x_head.shape[:-1] + (self.cfg.num_classes,), dtype=x_head.dtype)
                else:
                    g = ops.to_channels_last(np.asarray(g, dtype=x_head.dtype))
                dx_head, grads[f"head{lvl}.w"], grads[f"head{lvl}.b"] = ops.pointwise_backward(
                    g, p[f"head{lvl}.w"], x_head)
                dh = dx_head if dh is None else dh + dx_head
            dh = self._cna_backward(name + ".conv2", dh, caches, grads)
            dh = self._cna_backward(name + ".conv1", dh, caches, grads)
            d_up, dskips[lvl] = dh[..., :c], dh[..., c:]
            dh_up, grads[name + ".up.w"], grads[name + ".up.b"] = ops.tconv_backward(
                np.ascontiguousarray(d_up), p[name + ".up.w"], caches[name + ".up"])

        dh = dh_up
        for lvl in range(L, 0, -1):
            if lvl < L:
                dh = dh + dskips[lvl]
            dh = self._cna_backward(f"enc{lvl}.conv2", dh, caches, grads)
            dh = self._cna_backward(f"enc{lvl}.conv1", dh, caches, grads)
            if lvl > 1:
                dh = self._cna_backward(f"enc{lvl}.down", dh, caches, grads)
        return grads


def build_unet(cfg: UNetConfig, seed: int = 0) -> UNet:
    return UNet(cfg, init_params(cfg, seed))
