"""Convolution kernels: forward, input-gradient and weight-gradient.

Every kernel exists twice, as a numba loop nest (``*_nb``) and as a vectorized
numpy version (``*_np``). The public names at the bottom dispatch on the
backend flag in :mod:`edgessd._accel`.

Layouts: activations ``(B, C, H, W)``; standard weights ``(N, M, K, K)``;
depthwise weights ``(M, K, K)``. All arrays are float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from edgessd._accel import USE_NUMBA, njit


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(xp, pad):
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


# ---------------------------------------------------------------- numba ---


@njit
def _im2col_nb(xp, b, k_, stride, ho, wo):
    m_ = xp.shape[1]
    cols = np.empty((m_ * k_ * k_, ho * wo))
    row = 0
    for m in range(m_):
        for i in range(k_):
            for j in range(k_):
                for oh in range(ho):
                    r = oh * stride + i
                    base = oh * wo
                    for ow in range(wo):
                        cols[row, base + ow] = xp[b, m, r, ow * stride + j]
                row += 1
    return cols


@njit
def _conv_fwd_nb(xp, w, stride, ho, wo):
    b_ = xp.shape[0]
    n_, m_, k_, _ = w.shape
    w2 = w.reshape(n_, m_ * k_ * k_)
    y = np.empty((b_, n_, ho, wo))
    for b in range(b_):
        if k_ == 1 and stride == 1:
            cols = xp[b].reshape(m_, ho * wo)
        else:
            cols = _im2col_nb(xp, b, k_, stride, ho, wo)
        y[b] = np.dot(w2, cols).reshape(n_, ho, wo)
    return y


@njit
def _conv_bwd_input_nb(gy, w, stride, hp, wp):
    b_, n_, ho, wo = gy.shape
    _, m_, k_, _ = w.shape
    w2t = np.ascontiguousarray(w.reshape(n_, m_ * k_ * k_).T)
    gxp = np.zeros((b_, m_, hp, wp))
    for b in range(b_):
        dcols = np.dot(w2t, gy[b].reshape(n_, ho * wo))
        row = 0
        for m in range(m_):
            for i in range(k_):
                for j in range(k_):
                    for oh in range(ho):
                        r = oh * stride + i
                        base = oh * wo
                        for ow in range(wo):
                            gxp[b, m, r, ow * stride + j] += dcols[row, base + ow]
                    row += 1
    return gxp


@njit
def _conv_bwd_weight_nb(gy, xp, stride, k_):
    b_, n_, ho, wo = gy.shape
    m_ = xp.shape[1]
    gw2 = np.zeros((n_, m_ * k_ * k_))
    for b in range(b_):
        if k_ == 1 and stride == 1:
            cols = xp[b].reshape(m_, ho * wo)
        else:
            cols = _im2col_nb(xp, b, k_, stride, ho, wo)
        gw2 += np.dot(gy[b].reshape(n_, ho * wo), cols.T)
    return gw2.reshape(n_, m_, k_, k_)


@njit
def _dw_fwd_nb(xp, w, stride, ho, wo):
    b_, m_, _, _ = xp.shape
    k_ = w.shape[1]
    y = np.zeros((b_, m_, ho, wo))
    for b in range(b_):
        for m in range(m_):
            for i in range(k_):
                for j in range(k_):
                    wv = w[m, i, j]
                    for oh in range(ho):
                        r = oh * stride + i
                        for ow in range(wo):
                            y[b, m, oh, ow] += wv * xp[b, m, r, ow * stride + j]
    return y


@njit
def _dw_bwd_input_nb(gy, w, stride, hp, wp):
    b_, m_, ho, wo = gy.shape
    k_ = w.shape[1]
    gxp = np.zeros((b_, m_, hp, wp))
    for b in range(b_):
        for m in range(m_):
            for i in range(k_):
                for j in range(k_):
                    wv = w[m, i, j]
                    for oh in range(ho):
                        r = oh * stride + i
                        for ow in range(wo):
                            gxp[b, m, r, ow * stride + j] += wv * gy[b, m, oh, ow]
    return gxp


@njit
def _dw_bwd_weight_nb(gy, xp, stride, k_):
    b_, m_, ho, wo = gy.shape
    gw = np.zeros((m_, k_, k_))
    for m in range(m_):
        for i in range(k_):
            for j in range(k_):
                acc = 0.0
                for b in range(b_):
                    for oh in range(ho):
                        r = oh * stride + i
                        for ow in range(wo):
                            acc += gy[b, m, oh, ow] * xp[b, m, r, ow * stride + j]
                gw[m, i, j] = acc
    return gw


# ---------------------------------------------------------------- numpy ---


def _windows(xp, k, stride):
    # (B, M, Ho, Wo, K, K) view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_fwd_np(xp, w, stride, ho, wo):
    k = w.shape[2]
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, N)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_bwd_input_np(gy, w, stride, hp, wp):
    b_, _, ho, wo = gy.shape
    _, m_, k, _ = w.shape
    gxp = np.zeros((b_, m_, hp, wp))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, M)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
    return gxp


def _conv_bwd_weight_np(gy, xp, stride, k):
    ho, wo = gy.shape[2:]
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (N, M, K, K)


def _dw_fwd_np(xp, w, stride, ho, wo):
    k = w.shape[1]
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    return np.einsum("bmhwij,mij->bmhw", win, w)


def _dw_bwd_input_np(gy, w, stride, hp, wp):
    b_, m_, ho, wo = gy.shape
    k = w.shape[1]
    gxp = np.zeros((b_, m_, hp, wp))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gy * w[None, :, i, j, None, None]
    return gxp


def _dw_bwd_weight_np(gy, xp, stride, k):
    ho, wo = gy.shape[2:]
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    return np.einsum("bmhw,bmhwij->mij", gy, win)


# ------------------------------------------------------------- dispatch ---

_IMPLS = {
    "numba": (_conv_fwd_nb, _conv_bwd_input_nb, _conv_bwd_weight_nb, _dw_fwd_nb, _dw_bwd_input_nb, _dw_bwd_weight_nb),
    "numpy": (_conv_fwd_np, _conv_bwd_input_np, _conv_bwd_weight_np, _dw_fwd_np, _dw_bwd_input_np, _dw_bwd_weight_np),
}


def kernels(backend: str | None = None):
    """Return the six kernels for ``backend`` (default: the env-selected one)."""
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    return _IMPLS[backend]


def conv_forward(x, w, stride, pad, backend=None):
    fwd = kernels(backend)[0]
    xp = np.ascontiguousarray(_pad(x, pad))
    k = w.shape[2]
    ho = out_size(x.shape[2], k, stride, pad)
    wo = out_size(x.shape[3], k, stride, pad)
    return fwd(xp, np.ascontiguousarray(w), stride, ho, wo)


def conv_backward(gy, x, w, stride, pad, backend=None):
    """Return ``(grad_input, grad_weight)`` for a standard convolution."""
    _, bwd_in, bwd_w, *_ = kernels(backend)
    gy = np.ascontiguousarray(gy)
    xp = np.ascontiguousarray(_pad(x, pad))
    gxp = bwd_in(gy, np.ascontiguousarray(w), stride, xp.shape[2], xp.shape[3])
    gw = bwd_w(gy, xp, stride, w.shape[2])
    return np.ascontiguousarray(_unpad(gxp, pad)), gw


def depthwise_forward(x, w, stride, pad, backend=None):
    fwd = kernels(backend)[3]
    xp = np.ascontiguousarray(_pad(x, pad))
    k = w.shape[1]
    ho = out_size(x.shape[2], k, stride, pad)
    wo = out_size(x.shape[3], k, stride, pad)
    return fwd(xp, np.ascontiguousarray(w), stride, ho, wo)


def depthwise_backward(gy, x, w, stride, pad, backend=None):
    """Return ``(grad_input, grad_weight)`` for a depthwise convolution."""
    *_, bwd_in, bwd_w = kernels(backend)
    gy = np.ascontiguousarray(gy)
    xp = np.ascontiguousarray(_pad(x, pad))
    gxp = bwd_in(gy, np.ascontiguousarray(w), stride, xp.shape[2], xp.shape[3])
    gw = bwd_w(gy, xp, stride, w.shape[1])
    return np.ascontiguousarray(_unpad(gxp, pad)), gw
