"""Hot inner loops: 3x3 convolution, 2x2 max-pooling and padded image shifts.

Every kernel exists twice, once as a numba ``@njit`` loop nest and once as
vectorised numpy. The public wrappers pick one according to the
``POPGRAD_NUMBA`` environment variable (``0``/``false``/``off`` disables
numba); numba is also skipped silently when it cannot be imported.
Both paths compute the same quantities up to floating-point summation order.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


PAD_ZEROS = 0
PAD_BORDER = 1
PAD_REFLECTION = 2
PAD_MODES = {"zeros": PAD_ZEROS, "border": PAD_BORDER, "reflection": PAD_REFLECTION}


def _flag_enabled():
    value = os.environ.get("POPGRAD_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "off", "no")


_USE_NUMBA = HAVE_NUMBA and _flag_enabled()


def use_numba(enabled=None):
    """Return whether the numba path is active; pass a bool to switch it."""
    global _USE_NUMBA
    if enabled is not None:
        _USE_NUMBA = bool(enabled) and HAVE_NUMBA
    return _USE_NUMBA


# ---------------------------------------------------------------------------
# convolution, stride 1, "same" zero padding (k // 2)


def conv2d_forward_numpy(x, w, b):
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,F
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_numpy(x, w, dout):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # F,C,k,k
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            # dout: N,F,H,W ; w[:, :, i, j]: F,C
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # N,H,W,C
            dxp[:, :, i:i + h, j:j + wd] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd]
    return np.ascontiguousarray(dx), dw, db


@njit(cache=True, nogil=True)
def _pad_numba(x, p):
    n_img, n_in, h, wd = x.shape
    xp = np.zeros((n_img, n_in, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    return xp


@njit(cache=True, nogil=True, fastmath=True)
def conv2d_forward_numba(x, w, b):
    n_img, n_in, h, wd = x.shape
    n_out = w.shape[0]
    k = w.shape[2]
    xp = _pad_numba(x, k // 2)
    out = np.empty((n_img, n_out, h, wd))
    for n in range(n_img):
        for f in range(n_out):
            o = out[n, f]
            o[:, :] = b[f]
            for c in range(n_in):
                src = xp[n, c]
                for ki in range(k):
                    for kj in range(k):
                        wv = w[f, c, ki, kj]
                        for i in range(h):
                            # innermost loop runs along a contiguous row
                            orow = o[i]
                            srow = src[i + ki]
                            for j in range(wd):
                                orow[j] += wv * srow[j + kj]
    return out


@njit(cache=True, nogil=True, fastmath=True)
def conv2d_backward_numba(x, w, dout):
    n_img, n_in, h, wd = x.shape
    n_out = w.shape[0]
    k = w.shape[2]
    p = k // 2
    xp = _pad_numba(x, p)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = np.zeros(n_out)
    for n in range(n_img):
        for c in range(n_in):
            src = xp[n, c]
            dst = dxp[n, c]
            for f in range(n_out):
                g = dout[n, f]
                for ki in range(k):
                    for kj in range(k):
                        wv = w[f, c, ki, kj]
                        acc = 0.0
                        for i in range(h):
                            grow = g[i]
                            srow = src[i + ki]
                            drow = dst[i + ki]
                            for j in range(wd):
                                acc += grow[j] * srow[j + kj]
                                drow[j + kj] += wv * grow[j]
                        dw[f, c, ki, kj] += acc
        for f in range(n_out):
            db[f] += dout[n, f].sum()
    return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd]), dw, db


def conv2d_forward(x, w, b):
    if _USE_NUMBA:
        return conv2d_forward_numba(x, w, b)
    return conv2d_forward_numpy(x, w, b)


def conv2d_backward(x, w, dout):
    if _USE_NUMBA:
        return conv2d_backward_numba(x, w, np.ascontiguousarray(dout))
    return conv2d_backward_numpy(x, w, dout)


# ---------------------------------------------------------------------------
# 2x2 max-pool, stride 2; trailing odd row/column is dropped.
# argmax holds the winning position 0..3 inside each window (first max wins).


def maxpool2x2_forward_numpy(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int8)


def maxpool2x2_backward_numpy(dout, arg, in_shape):
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    win = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(win, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, :2 * h2, :2 * w2] = win.reshape(n, c, 2 * h2, 2 * w2)
    return dx


@njit(cache=True, nogil=True)
def maxpool2x2_forward_numba(x):
    n_img, n_ch, h, w = x.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((n_img, n_ch, h2, w2))
    arg = np.empty((n_img, n_ch, h2, w2), dtype=np.int8)
    for n in range(n_img):
        for c in range(n_ch):
            for i in range(h2):
                for j in range(w2):
                    best = x[n, c, 2 * i, 2 * j]
                    pos = 0
                    for q in range(1, 4):
                        v = x[n, c, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            pos = q
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = pos
    return out, arg


@njit(cache=True, nogil=True)
def _maxpool2x2_backward_numba(dout, arg, dx):
    n_img, n_ch, h2, w2 = dout.shape
    for n in range(n_img):
        for c in range(n_ch):
            for i in range(h2):
                for j in range(w2):
                    q = arg[n, c, i, j]
                    dx[n, c, 2 * i + q // 2, 2 * j + q % 2] += dout[n, c, i, j]
    return dx


def maxpool2x2_backward_numba(dout, arg, in_shape):
    return _maxpool2x2_backward_numba(np.ascontiguousarray(dout), arg, np.zeros(in_shape))


def maxpool2x2_forward(x):
    if _USE_NUMBA:
        return maxpool2x2_forward_numba(x)
    return maxpool2x2_forward_numpy(x)


def maxpool2x2_backward(dout, arg, in_shape):
    if _USE_NUMBA:
        return maxpool2x2_backward_numba(dout, arg, in_shape)
    return maxpool2x2_backward_numpy(dout, arg, in_shape)


# ---------------------------------------------------------------------------
# integer shift with out-of-range fill: out[r, c] = in[r - dy, c - dx]


def _resolve_numpy(idx, size, mode):
    if mode == PAD_BORDER:
        return np.clip(idx, 0, size - 1)
    if mode == PAD_REFLECTION:
        idx = np.where(idx < 0, -idx, idx)
        idx = np.where(idx > size - 1, 2 * (size - 1) - idx, idx)
        return idx
    return np.clip(idx, 0, size - 1)


def shift_pad_numpy(images, dx, dy, mode):
    n, c, h, w = images.shape
    rows = np.arange(h)[None, :] - dy[:, None]  # N,H
    cols = np.arange(w)[None, :] - dx[:, None]  # N,W
    r = _resolve_numpy(rows, h, mode)
    q = _resolve_numpy(cols, w, mode)
    out = images[
        np.arange(n)[:, None, None, None],
        np.arange(c)[None, :, None, None],
        r[:, None, :, None],
        q[:, None, None, :],
    ]
    if mode == PAD_ZEROS:
        valid = ((rows >= 0) & (rows < h))[:, :, None] & ((cols >= 0) & (cols < w))[:, None, :]
        out = np.where(valid[:, None, :, :], out, 0.0)
    return np.ascontiguousarray(out)


@njit(cache=True, nogil=True)
def _resolve_numba(i, size, mode):
    if i >= 0 and i < size:
        return i
    if mode == 0:
        return -1
    if mode == 1:
        return 0 if i < 0 else size - 1
    if i < 0:
        i = -i
    if i > size - 1:
        i = 2 * (size - 1) - i
    return i


@njit(cache=True, nogil=True)
def shift_pad_numba(images, dx, dy, mode):
    n_img, n_ch, h, w = images.shape
    out = np.zeros_like(images)
    for n in range(n_img):
        for r in range(h):
            rr = _resolve_numba(r - dy[n], h, mode)
            if rr < 0:
                continue
            for col in range(w):
                cc = _resolve_numba(col - dx[n], w, mode)
                if cc < 0:
                    continue
                for c in range(n_ch):
                    out[n, c, r, col] = images[n, c, rr, cc]
    return out


def shift_pad(images, dx, dy, mode):
    """Shift each image ``n`` by ``(dx[n], dy[n])`` pixels.

    ``mode`` is one of the PAD_* constants; shifts must satisfy
    ``|d| <= size - 1`` so a single reflection suffices.
    """
    dx = np.asarray(dx, dtype=np.int64)
    dy = np.asarray(dy, dtype=np.int64)
    if _USE_NUMBA:
        return shift_pad_numba(np.ascontiguousarray(images), dx, dy, mode)
    return shift_pad_numpy(images, dx, dy, mode)
