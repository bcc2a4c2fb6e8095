"""Direct 2-D cross-correlation kernels and their two adjoints.

Every kernel exists twice: a numba ``@njit`` im2col/col2im path that hands
the contraction to BLAS, and a pure-numpy version built on strided windows
and ``tensordot``.  The numba path is used
when numba imports and the ``LLR_NUMBA`` environment variable is not ``0``.

Layouts are NCHW for activations and OIHW for weights.  ``pad`` is symmetric
zero padding; ``stride`` is 1 or 2.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import config as _nb_config
    from numba import njit, prange

    _nb_config.THREADING_LAYER = "workqueue"

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_ENV_FLAG = "LLR_NUMBA"


def numba_enabled():
    return HAVE_NUMBA and os.environ.get(_ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


def backend():
    """Name of the kernel backend selected for this process."""
    return "numba" if numba_enabled() else "numpy"


def conv_output_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _owned(a):
    # One signature per kernel: numba's on-disk cache can return a broken
    # entry when read-only and writable specializations coexist.
    return np.require(a, np.float64, ["C", "W"])


def _crop(xp, pad):
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])


# ---------------------------------------------------------------- numpy path


def conv2d_numpy(x, w, stride, pad):
    kh, kw = w.shape[2:]
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    win = sliding_window_view(_pad(x, pad), (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_input_grad_numpy(g, w, in_shape, stride, pad):
    n, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # N, Ho, Wo, C
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return _crop(dxp, pad)


def conv2d_weight_grad_numpy(x, g, w_shape, stride, pad):
    _, _, kh, kw = w_shape
    ho, wo = g.shape[2:]
    xp = _pad(x, pad)
    dw = np.empty(w_shape)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
            dw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n_img, n_c = xp.shape[0], xp.shape[1]
        cols = np.empty((n_img * ho * wo, n_c * kh * kw))
        for n in prange(n_img):
            for p in range(ho):
                for q in range(wo):
                    row = (n * ho + p) * wo + q
                    k = 0
                    for c in range(n_c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, k] = xp[n, c, p * stride + i, q * stride + j]
                                k += 1
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_nb(cols, n_img, n_c, hp, wp, kh, kw, stride, ho, wo):
        dxp = np.zeros((n_img, n_c, hp, wp))
        for n in prange(n_img):
            for p in range(ho):
                for q in range(wo):
                    row = (n * ho + p) * wo + q
                    k = 0
                    for c in range(n_c):
                        for i in range(kh):
                            for j in range(kw):
                                dxp[n, c, p * stride + i, q * stride + j] += cols[row, k]
                                k += 1
        return dxp

    @njit(cache=True)
    def _nhwc_rows(g):
        # (N, O, Ho, Wo) -> (N*Ho*Wo, O)
        n_img, n_o, ho, wo = g.shape
        out = np.empty((n_img * ho * wo, n_o))
        for n in range(n_img):
            for o in range(n_o):
                for p in range(ho):
                    for q in range(wo):
                        out[(n * ho + p) * wo + q, o] = g[n, o, p, q]
        return out

    @njit(cache=True)
    def _nchw_from_rows(rows, n_img, ho, wo):
        n_o = rows.shape[1]
        out = np.empty((n_img, n_o, ho, wo))
        for n in range(n_img):
            for o in range(n_o):
                for p in range(ho):
                    for q in range(wo):
                        out[n, o, p, q] = rows[(n * ho + p) * wo + q, o]
        return out

    @njit(cache=True)
    def _conv_fwd_nb(xp, w, stride, ho, wo):
        n_o, n_c, kh, kw = w.shape
        cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
        rows = np.dot(cols, np.ascontiguousarray(w.reshape(n_o, n_c * kh * kw).T))
        return _nchw_from_rows(rows, xp.shape[0], ho, wo)

    @njit(cache=True)
    def _conv_in_grad_nb(g, w, stride, hp, wp):
        n_img, n_o, ho, wo = g.shape
        n_c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        cols = np.dot(_nhwc_rows(g), w.reshape(n_o, n_c * kh * kw))
        return _col2im_nb(cols, n_img, n_c, hp, wp, kh, kw, stride, ho, wo)

    @njit(cache=True)
    def _conv_w_grad_nb(xp, g, stride, kh, kw):
        n_img, n_o, ho, wo = g.shape
        n_c = xp.shape[1]
        cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
        dw = np.dot(np.ascontiguousarray(_nhwc_rows(g).T), cols)
        return dw.reshape(n_o, n_c, kh, kw)


def conv2d_numba(x, w, stride, pad):
    kh, kw = w.shape[2:]
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    return _conv_fwd_nb(_owned(_pad(x, pad)), _owned(w), stride, ho, wo)


def conv2d_input_grad_numba(g, w, in_shape, stride, pad):
    _, _, h, wd = in_shape
    dxp = _conv_in_grad_nb(_owned(g), _owned(w), stride, h + 2 * pad, wd + 2 * pad)
    return _crop(dxp, pad)


def conv2d_weight_grad_numba(x, g, w_shape, stride, pad):
    return _conv_w_grad_nb(_owned(_pad(x, pad)), _owned(g), stride, w_shape[2], w_shape[3])


# ---------------------------------------------------------------- dispatch


def conv2d(x, w, stride, pad):
    if numba_enabled():
        return conv2d_numba(x, w, stride, pad)
    return conv2d_numpy(x, w, stride, pad)


def conv2d_input_grad(g, w, in_shape, stride, pad):
    if numba_enabled():
        return conv2d_input_grad_numba(g, w, in_shape, stride, pad)
    return conv2d_input_grad_numpy(g, w, in_shape, stride, pad)


def conv2d_weight_grad(x, g, w_shape, stride, pad):
    if numba_enabled():
        return conv2d_weight_grad_numba(x, g, w_shape, stride, pad)
    return conv2d_weight_grad_numpy(x, g, w_shape, stride, pad)
