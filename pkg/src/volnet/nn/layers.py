"""Forward/backward kernels for every layer kind.

All functions take batched arrays laid out ``(batch, channels, *spatial)`` and
work in whatever float dtype they are given (float32 for training, float64 for
gradient checks).  Convolutions are evaluated per sample with im2col, chunked
along the first spatial axis; per-sample results are combined in sample order,
so the output does not depend on the worker count.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import ShapeMismatch

KERNEL = 3
# Upper bound on im2col elements per chunk (~32 MB of float32).
_CHUNK_ELEMS = 1 << 23


def num_threads() -> int:
    value = os.environ.get("VOLNET_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def _map_samples(fn, n: int) -> list:
    workers = min(num_threads(), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, range(n)))


def _taps(nd: int):
    return list(itertools.product(range(KERNEL), repeat=nd))


def _rows_per_chunk(cin: int, spatial) -> int:
    per_row = cin * KERNEL ** len(spatial) * math.prod(spatial[1:])
    return max(1, _CHUNK_ELEMS // per_row)


def _tap_slice(off, r0, r1, spatial):
    return (slice(None), slice(r0 + off[0], r1 + off[0]),
            *(slice(o, o + n) for o, n in zip(off[1:], spatial[1:])))


def _im2col(xp, r0, r1, spatial, taps):
    cin = xp.shape[0]
    cols = np.empty((cin, len(taps), r1 - r0, *spatial[1:]), dtype=xp.dtype)
    for t, off in enumerate(taps):
        cols[:, t] = xp[_tap_slice(off, r0, r1, spatial)]
    return cols.reshape(cin * len(taps), -1)


def _check_conv(x, w, b):
    nd = x.ndim - 2
    if nd not in (2, 3):
        raise ShapeMismatch(f"convolution input must be (B, C, *2 or 3 spatial), got {x.shape}")
    if w.shape[2:] != (KERNEL,) * nd or w.ndim != nd + 2:
        raise ShapeMismatch(f"kernel shape {w.shape} does not match {nd}D input")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    return nd


def conv_forward(x, w, b):
    """Stride-1, zero-padding-1 convolution (cross-correlation) with 3-wide kernels.

    Returns ``(y, cache)``; ``y`` keeps the spatial extents of ``x``.
    """
    nd = _check_conv(x, w, b)
    cout = w.shape[0]
    spatial = x.shape[2:]
    taps = _taps(nd)
    w2 = w.reshape(cout, -1)
    step = _rows_per_chunk(x.shape[1], spatial)
    pad = [(0, 0)] + [(1, 1)] * nd

    def one(i):
        xp = np.pad(x[i], pad)
        y = np.empty((cout, *spatial), dtype=x.dtype)
        for r0 in range(0, spatial[0], step):
            r1 = min(spatial[0], r0 + step)
            y[:, r0:r1] = (w2 @ _im2col(xp, r0, r1, spatial, taps)).reshape(cout, r1 - r0, *spatial[1:])
        y += b.reshape((cout,) + (1,) * nd)
        return y

    y = np.stack(_map_samples(one, x.shape[0]))
    return y, (x, w)


def conv_backward(cache, dy, need_dx=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    x, w = cache
    nd = x.ndim - 2
    cout = w.shape[0]
    spatial = x.shape[2:]
    if dy.shape != (x.shape[0], cout, *spatial):
        raise ShapeMismatch(f"upstream gradient shape {dy.shape} does not match conv output")
    taps = _taps(nd)
    w2 = w.reshape(cout, -1)
    step = _rows_per_chunk(x.shape[1], spatial)
    pad = [(0, 0)] + [(1, 1)] * nd

    def one(i):
        xp = np.pad(x[i], pad)
        dxp = np.zeros_like(xp) if need_dx else None
        dw = np.zeros_like(w2)
        for r0 in range(0, spatial[0], step):
            r1 = min(spatial[0], r0 + step)
            dy2 = dy[i, :, r0:r1].reshape(cout, -1)
            dw += dy2 @ _im2col(xp, r0, r1, spatial, taps).T
            if need_dx:
                dcols = (w2.T @ dy2).reshape(x.shape[1], len(taps), r1 - r0, *spatial[1:])
                for t, off in enumerate(taps):
                    dxp[_tap_slice(off, r0, r1, spatial)] += dcols[:, t]
        dx = dxp[(slice(None),) + (slice(1, -1),) * nd] if need_dx else None
        return dx, dw

    parts = _map_samples(one, x.shape[0])
    dw = parts[0][1]
    for _, part in parts[1:]:
        dw = dw + part
    db = dy.sum(axis=tuple(i for i in range(dy.ndim) if i != 1))
    dx = np.stack([p[0] for p in parts]) if need_dx else None
    return dx, dw.reshape(w.shape), db


def pool_output_shape(spatial, kernel, end_pad=False):
    if len(kernel) != len(spatial):
        raise ShapeMismatch(f"pool kernel {kernel} does not match spatial rank of {spatial}")
    out = tuple(-(-n // k) if end_pad else n // k for n, k in zip(spatial, kernel))
    if any(o < 1 for o in out):
        raise ShapeMismatch(f"pooling {spatial} by {kernel} leaves an empty axis")
    return out


def maxpool_forward(x, kernel, end_pad=False):
    """Max pooling with stride equal to the kernel.

    Trailing voxels that do not fill a window are dropped, or, with
    ``end_pad``, the window is completed with -inf.  Ties go to the first
    element in row-major scan order of the window.
    """
    kernel = tuple(kernel)
    b, c, *spatial = x.shape
    out = pool_output_shape(spatial, kernel, end_pad)
    covered = tuple(o * k for o, k in zip(out, kernel))
    region = x[(slice(None), slice(None), *(slice(0, min(n, cv)) for n, cv in zip(spatial, covered)))]
    if region.shape[2:] != covered:
        padded = np.full((b, c, *covered), -np.inf, dtype=x.dtype)
        padded[(slice(None), slice(None), *(slice(0, n) for n in region.shape[2:]))] = region
        region = padded
    nd = len(kernel)
    split = [b, c]
    for o, k in zip(out, kernel):
        split += [o, k]
    order = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
    windows = region.reshape(split).transpose(order).reshape(b, c, *out, -1)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, kernel, out, idx)


def maxpool_backward(cache, dy):
    x_shape, kernel, out, idx = cache
    if dy.shape != idx.shape:
        raise ShapeMismatch(f"upstream gradient shape {dy.shape} does not match pool output {idx.shape}")
    b, c, *spatial = x_shape
    nd = len(kernel)
    windows = np.zeros((*idx.shape, math.prod(kernel)), dtype=dy.dtype)
    np.put_along_axis(windows, idx[..., None], dy[..., None], axis=-1)
    windows = windows.reshape(b, c, *out, *kernel)
    inverse = [0, 1]
    for i in range(nd):
        inverse += [2 + i, 2 + nd + i]
    covered = tuple(o * k for o, k in zip(out, kernel))
    region = windows.transpose(inverse).reshape(b, c, *covered)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    keep = tuple(min(n, cv) for n, cv in zip(spatial, covered))
    sl = (slice(None), slice(None), *(slice(0, k) for k in keep))
    dx[sl] = region[sl]
    return dx


def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(cache, dy, need_dx=True):
    x, w = cache
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeMismatch(f"upstream gradient shape {dy.shape} does not match dense output")
    dx = dy @ w if need_dx else None
    return dx, dy.T @ x, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(mask, dy):
    return dy * mask


def sigmoid_forward(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def sigmoid_backward(y, dy):
    return dy * y * (1 - y)


def dropout_forward(x, rate, rng=None, mode="train"):
    """Inverted dropout.  Returns ``(y, mask)``; mask is None when nothing was dropped."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0:
        return x, None
    keep = rng.uniform01(x.shape) >= rate
    mask = (keep / (1 - rate)).astype(x.dtype)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask
