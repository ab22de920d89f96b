"""Dense 3D layer kernels with explicit backward passes.

Kernels work on channels-last arrays ``(n, d, h, w, c)``; every kernel tap
becomes a ``(rows, c_in) @ (c_in, c_out)`` matmul over a shifted view of
the padded input. ``conv3d``, ``transposed_conv3d`` and
``instance_norm`` at the bottom accept the (n, c, d, h, w) layout.

Convolution weights are stored ``(out_c, in_c, k, k, k)``. A transposed
convolution reuses the layout of the strided convolution it is the adjoint
of, so its weight is ``(in_c_of_transposed, out_c_of_transposed, k, k, k)``.
"""
from __future__ import annotations

import itertools

import numpy as np


def _taps(k: int):
    return itertools.product(range(k), repeat=3)


def _window(a: np.ndarray, tap, out_shape, stride: int) -> np.ndarray:
    i, j, l = tap
    d, h, w = out_shape
    s = stride
    return a[:, i : i + s * (d - 1) + 1 : s, j : j + s * (h - 1) + 1 : s, l : l + s * (w - 1) + 1 : s, :]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


def _unpad(x: np.ndarray, p: int, shape) -> np.ndarray:
    return x[:, p : p + shape[0], p : p + shape[1], p : p + shape[2], :]


def conv_out_shape(spatial, k: int, stride: int) -> tuple[int, int, int]:
    p = k // 2
    return tuple((n + 2 * p - k) // stride + 1 for n in spatial)


def _check_kernel(w: np.ndarray, in_c: int):
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"kernel must be (out_c, in_c, k, k, k), got {w.shape}")
    if w.shape[2] % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
    if w.shape[1] != in_c:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {in_c}")


def _row_stack(flat: np.ndarray, k: int) -> np.ndarray:
    """(N, c) -> (N, k*c): row q holds rows q..q+k-1, zero past the end."""
    n, c = flat.shape
    g = np.zeros((n, k * c), dtype=flat.dtype)
    for l in range(k):
        g[: n - l, l * c : (l + 1) * c] = flat[l:]
    return g


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Cross-correlation with 'same' padding (k // 2); stride 2 gives ceil(n / 2)."""
    n, c = x.shape[0], x.shape[-1]
    _check_kernel(w, c)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    k, o = w.shape[2], w.shape[0]
    xp = _pad(x, k // 2)
    out = conv_out_shape(x.shape[1:4], k, stride)
    if stride == 1:
        g = _row_stack(xp.reshape(-1, c), k)
        y = _conv_flat(g, xp.shape, w, out)
        return y + b, (g, x.shape, stride)
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    m = n * out[0] * out[1] * out[2]
    y = np.zeros((m, o), dtype=x.dtype)
    tmp = np.empty_like(y)
    for tap in _taps(k):
        xs = _window(xp, tap, out, stride).reshape(m, c)
        np.matmul(xs, wk[tap], out=tmp)
        y += tmp
    y = y.reshape((n,) + out + (o,)) + b
    return y, (xp, x.shape, stride)


# Stride-1 path. In the flattened padded array a tap (i, j, l) is the
# constant row offset (i*Hp + j)*Wp + l. The k taps along the last axis are
# stacked into channels once, leaving k*k matmuls over contiguous slices.
# Rows whose window wraps across a row, plane or sample are computed and
# then cropped away.

def _plane_offsets(k: int, padded_shape):
    _, hp, wp = padded_shape
    return [(i, j, (i * hp + j) * wp) for i in range(k) for j in range(k)]


def _conv_flat(g, padded_shape, w, out):
    """Stride-1 conv of the row-stacked padded input ``g``; returns (n, *out, o)."""
    k, o = w.shape[2], w.shape[0]
    c = g.shape[1] // k
    wg = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(k, k, k * c, o)
    offs = _plane_offsets(k, padded_shape[1:4])
    rows = g.shape[0] - offs[-1][2]
    acc = np.zeros((g.shape[0], o), dtype=g.dtype)
    head = acc[:rows]
    tmp = np.empty((rows, o), dtype=g.dtype)
    for i, j, off in offs:
        np.matmul(g[off : off + rows], wg[i, j], out=tmp)
        head += tmp
    acc = acc.reshape(tuple(padded_shape[:4]) + (o,))
    return np.ascontiguousarray(acc[:, : out[0], : out[1], : out[2]])


def _conv_flat_backward(dy, w, g, x_shape):
    k, o = w.shape[2], w.shape[0]
    c = x_shape[-1]
    p = k // 2
    padded = (x_shape[0],) + tuple(s + 2 * p for s in x_shape[1:4]) + (c,)
    # dx: 'same' correlation of dy with the flipped, channel-swapped kernel
    dyp = _pad(dy, p)
    w_adj = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    dx = _conv_flat(_row_stack(dyp.reshape(-1, o), k), dyp.shape, w_adj, x_shape[1:4])
    # dw: dy laid out on the padded grid against the stacked input
    dyg = np.zeros(padded[:4] + (o,), dtype=dy.dtype)
    dyg[:, : x_shape[1], : x_shape[2], : x_shape[3]] = dy
    offs = _plane_offsets(k, padded[1:4])
    rows = g.shape[0] - offs[-1][2]
    dys = dyg.reshape(-1, o)[:rows]
    dwg = np.empty((k, k, k * c, o), dtype=w.dtype)
    for i, j, off in offs:
        np.matmul(g[off : off + rows].T, dys, out=dwg[i, j])
    dw = dwg.reshape(k, k, k, c, o).transpose(4, 3, 0, 1, 2)
    return dx, dw


def conv_backward(dy: np.ndarray, w: np.ndarray, cache):
    """Gradients ``(dx, dw, db)``; the cache holds the stacked (stride 1) or padded input."""
    src, x_shape, stride = cache
    k, o = w.shape[2], w.shape[0]
    db = dy.reshape(-1, o).sum(axis=0)
    if stride == 1:
        dx, dw = _conv_flat_backward(dy, w, src, x_shape)
        return dx, dw, db
    n, c = x_shape[0], x_shape[-1]
    out = dy.shape[1:4]
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    dwk = np.empty(wk.shape, dtype=wk.dtype)
    m = n * out[0] * out[1] * out[2]
    dyf = dy.reshape(m, o)
    dxp = np.zeros_like(src)
    for tap in _taps(k):
        xs = _window(src, tap, out, stride).reshape(m, c)
        np.matmul(xs.T, dyf, out=dwk[tap])
        _window(dxp, tap, out, stride)[...] += (dyf @ wk[tap].T).reshape((n,) + tuple(out) + (c,))
    dx = _unpad(dxp, k // 2, x_shape[1:4])
    return dx, dwk.transpose(4, 3, 0, 1, 2), db


def tconv_forward(u: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2):
    """Adjoint of the stride-``stride`` convolution with kernel ``w``; spatial dims scale by ``stride``."""
    n, cu = u.shape[0], u.shape[-1]
    if w.ndim != 5 or w.shape[0] != cu:
        raise ValueError(f"transposed kernel must be ({cu}, out_c, k, k, k), got {w.shape}")
    k, cz = w.shape[2], w.shape[1]
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    p = k // 2
    coarse = u.shape[1:4]
    fine = tuple(stride * s for s in coarse)
    m = n * coarse[0] * coarse[1] * coarse[2]
    uf = u.reshape(m, cu)
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))  # (k, k, k, cz, cu)
    zp = np.zeros((n,) + tuple(s + 2 * p for s in fine) + (cz,), dtype=u.dtype)
    for tap in _taps(k):
        _window(zp, tap, coarse, stride)[...] += (uf @ wk[tap].T).reshape((n,) + coarse + (cz,))
    z = _unpad(zp, p, fine) + b
    return np.ascontiguousarray(z), (u, stride)


def tconv_backward(dz: np.ndarray, w: np.ndarray, cache):
    u, stride = cache
    n, cu = u.shape[0], u.shape[-1]
    k, cz = w.shape[2], w.shape[1]
    p = k // 2
    coarse = u.shape[1:4]
    m = n * coarse[0] * coarse[1] * coarse[2]
    uf = u.reshape(m, cu)
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    dzp = _pad(dz, p)
    du = np.zeros((m, cu), dtype=dz.dtype)
    dwk = np.empty(wk.shape, dtype=wk.dtype)
    for tap in _taps(k):
        zs = _window(dzp, tap, coarse, stride).reshape(m, cz)
        du += zs @ wk[tap]
        np.matmul(zs.T, uf, out=dwk[tap])
    db = dz.reshape(-1, cz).sum(axis=0)
    return du.reshape(u.shape), dwk.transpose(4, 3, 0, 1, 2), db


def instance_norm_forward(x, scale, shift, eps: float = 1e-5):
    axes = (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def instance_norm_backward(dy, cache):
    xhat, inv, scale = cache
    axes = (1, 2, 3)
    count = xhat.shape[1] * xhat.shape[2] * xhat.shape[3]
    flat = dy.reshape(-1, dy.shape[-1])
    dshift = flat.sum(axis=0)
    dscale = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * scale
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (inv / count) * (count * dxhat - s1 - xhat * s2)
    return dx, dscale, dshift


def leaky_relu_forward(x, slope: float = 0.01):
    pos = x >= 0
    return np.where(pos, x, x * slope), (pos, slope)


def leaky_relu_backward(dy, cache):
    pos, slope = cache
    return np.where(pos, dy, dy * slope)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def pointwise_forward(x, w, b):
    """1x1x1 convolution; ``w`` is (out_c, in_c, 1, 1, 1)."""
    w2 = w.reshape(w.shape[0], w.shape[1])
    return x @ w2.T + b, x


def pointwise_backward(dy, w, x):
    w2 = w.reshape(w.shape[0], w.shape[1])
    c, o = x.shape[-1], dy.shape[-1]
    dyf = dy.reshape(-1, o)
    dw = (dyf.T @ x.reshape(-1, c)).reshape(w.shape)
    return dy @ w2, dw, dyf.sum(axis=0)


# ---------------------------------------------------------------------------
# (n, c, d, h, w) wrappers

def to_channels_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def to_channels_first(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


def _check5(x):
    if x.ndim != 5 or min(x.shape) < 1:
        raise ValueError(f"expected a non-empty (n, c, d, h, w) tensor, got shape {x.shape}")


def conv3d(x, kernel, bias=None, stride: int = 1):
    _check5(x)
    if bias is None:
        bias = np.zeros(kernel.shape[0], dtype=x.dtype)
    y, _ = conv_forward(to_channels_last(x), kernel, bias, stride)
    return to_channels_first(y)


def transposed_conv3d(x, kernel, bias=None, stride: int = 2):
    _check5(x)
    if bias is None:
        bias = np.zeros(kernel.shape[1], dtype=x.dtype)
    z, _ = tconv_forward(to_channels_last(x), kernel, bias, stride)
    return to_channels_first(z)


def instance_norm(x, scale, shift, eps: float = 1e-5):
    _check5(x)
    y, _ = instance_norm_forward(to_channels_last(x), scale, shift, eps)
    return to_channels_first(y)


def leaky_relu(x, slope: float = 0.01):
    return np.where(x >= 0, x, x * slope)
