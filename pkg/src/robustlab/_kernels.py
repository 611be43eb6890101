"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with bitwise-identical output. The numba
path is used by default; set ``ROBUSTLAB_DISABLE_NUMBA=1`` before import to
force the numpy path (useful for debugging and for platforms without numba).
Both variants stay importable under ``*_numpy`` / ``*_numba`` names so tests
and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("ROBUSTLAB_DISABLE_NUMBA", "") not in ("1", "true", "yes")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im
#
# Column layout: row index enumerates (n, oh, ow), column index enumerates
# (c, ki, kj), so ``cols @ w.reshape(c_out, -1).T`` is the convolution.
# ---------------------------------------------------------------------------


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (n, ho, wo, c, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols6 = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += cols6[:, :, :, :, ki, kj]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


@njit(cache=True)
def _im2col_nb(x, k, stride, pad, ho, wo):
    n, c, h, w = x.shape
    cols = np.empty((n * ho * wo, c * k * k))
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                dst = cols[(b * ho + oh) * wo + ow]
                j = 0
                for ch in range(c):
                    src = x[b, ch]
                    for ki in range(k):
                        ih = oh * stride + ki - pad
                        inside = 0 <= ih < h
                        for kj in range(k):
                            iw = ow * stride + kj - pad
                            dst[j] = src[ih, iw] if inside and 0 <= iw < w else 0.0
                            j += 1
    return cols


@njit(cache=True)
def _col2im_nb(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.zeros((n, c, h, w))
    # accumulation order per pixel follows (ki, kj) like the numpy twin
    for b in range(n):
        for ch in range(c):
            for ki in range(k):
                for kj in range(k):
                    col = (ch * k + ki) * k + kj
                    for oh in range(ho):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= h:
                            continue
                        for ow in range(wo):
                            iw = ow * stride + kj - pad
                            if iw < 0 or iw >= w:
                                continue
                            out[b, ch, ih, iw] += cols[(b * ho + oh) * wo + ow, col]
    return out


def im2col_numba(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    _, _, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    return _im2col_nb(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad, ho, wo)


def col2im_numba(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    return _col2im_nb(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, k, stride, pad, ho, wo)


# ---------------------------------------------------------------------------
# Regression-tree split search
# ---------------------------------------------------------------------------


@njit(cache=True)
def _midpoint(a, b):
    # for adjacent floats the midpoint can round up to b; keep "x <= thr" exact
    m = 0.5 * (a + b)
    return a if m >= b else m


def best_split_numpy(x: np.ndarray, r: np.ndarray, min_leaf: int):
    """Best variance-reduction split over all features.

    Returns ``(gain, feature, threshold)``; ``feature == -1`` when no split
    leaves ``min_leaf`` samples on both sides. Ties go to the lowest feature,
    then the lowest threshold.
    """
    n, d = x.shape
    best_gain, best_f, best_thr = 0.0, -1, 0.0
    if n < 2 * min_leaf:
        return best_gain, best_f, best_thr
    total = 0.0
    for v in r:
        total += v
    base = total * total / n
    for f in range(d):
        order = np.argsort(x[:, f], kind="mergesort")
        xs = x[order, f]
        left = np.cumsum(r[order])
        nl = np.arange(1, n + 1, dtype=np.float64)
        # candidate i splits after sorted position i
        i = np.arange(min_leaf - 1, n - min_leaf)
        i = i[xs[i] < xs[i + 1]]
        if i.size == 0:
            continue
        sl = left[i]
        sr = total - sl
        gains = sl * sl / nl[i] + sr * sr / (n - nl[i]) - base
        j = int(np.argmax(gains))
        if gains[j] > best_gain:
            best_gain = float(gains[j])
            best_f = f
            best_thr = _midpoint(float(xs[i[j]]), float(xs[i[j] + 1]))
    return best_gain, best_f, best_thr


@njit(cache=True)
def _best_split_nb(x, r, min_leaf):
    n, d = x.shape
    best_gain, best_f, best_thr = 0.0, -1, 0.0
    if n < 2 * min_leaf:
        return best_gain, best_f, best_thr
    total = 0.0
    for v in r:
        total += v
    base = total * total / n
    for f in range(d):
        col = x[:, f].copy()
        order = np.argsort(col, kind="mergesort")
        sl = 0.0
        f_gain, f_pos = 0.0, -1
        for i in range(n - min_leaf):
            sl += r[order[i]]
            if i < min_leaf - 1:
                continue
            if not col[order[i]] < col[order[i + 1]]:
                continue
            sr = total - sl
            nl = float(i + 1)
            g = sl * sl / nl + sr * sr / (n - nl) - base
            if f_pos < 0 or g > f_gain:
                f_gain, f_pos = g, i
        if f_pos >= 0 and f_gain > best_gain:
            best_gain = f_gain
            best_f = f
            best_thr = _midpoint(col[order[f_pos]], col[order[f_pos + 1]])
    return best_gain, best_f, best_thr


def best_split_numba(x: np.ndarray, r: np.ndarray, min_leaf: int):
    g, f, t = _best_split_nb(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(r, dtype=np.float64), min_leaf)
    return float(g), int(f), float(t)


if USE_NUMBA:
    im2col, col2im, best_split = im2col_numba, col2im_numba, best_split_numba
else:
    im2col, col2im, best_split = im2col_numpy, col2im_numpy, best_split_numpy
