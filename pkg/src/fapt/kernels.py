"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel exists twice: ``<name>_numba`` (loop form, compiled with numba when
available) and ``<name>_numpy`` (vectorised). The unsuffixed name is bound to one
of them at import time according to :data:`fapt._backend.USE_NUMBA`.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import USE_NUMBA, njit

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# channel-table synthesis
# ---------------------------------------------------------------------------

def synth_tables_numpy(coef, tx, kz, ky, doppler, times, n_rows, n_cols):
    """Per-port channel tables for every time instant and BS element.

    Parameters
    ----------
    coef : (P,) complex
        Static per-path weight ``alpha_p * beta_p * exp(j 2 pi f tau_p)``.
    tx : (P, Nt) complex
        Transmit steering vector of every path.
    kz, ky : (P,) float
        Receive phase increment (radians) per z-port step and per y-port step.
    doppler : (P,) float
        Doppler shift in Hz.
    times : (Tn,) float
        Sampling instants in seconds.

    Returns
    -------
    (Tn, Nt, n_rows, n_cols) complex128
    """
    times = np.asarray(times, dtype=np.float64)
    tphase = np.exp(1j * (TWO_PI * np.multiply.outer(times, doppler)))
    weight = tphase * coef[None, :]
    n = np.arange(n_rows, dtype=np.float64)
    m = np.arange(n_cols, dtype=np.float64)
    rx = np.exp(1j * (kz[:, None, None] * n[None, :, None] + ky[:, None, None] * m[None, None, :]))
    out = np.einsum("tp,pk,pnm->tknm", weight, tx, rx, optimize=True)
    return np.ascontiguousarray(out, dtype=np.complex128)


@njit
def synth_tables_numba(coef, tx, kz, ky, doppler, times, n_rows, n_cols):
    n_paths = coef.shape[0]
    n_ant = tx.shape[1]
    n_t = times.shape[0]
    out = np.zeros((n_t, n_ant, n_rows, n_cols), dtype=np.complex128)
    rx = np.empty((n_paths, n_rows, n_cols), dtype=np.complex128)
    for p in range(n_paths):
        for a in range(n_rows):
            for b in range(n_cols):
                ph = kz[p] * a + ky[p] * b
                rx[p, a, b] = np.cos(ph) + 1j * np.sin(ph)
    for t in range(n_t):
        for p in range(n_paths):
            ph = TWO_PI * (times[t] * doppler[p])
            w = coef[p] * (np.cos(ph) + 1j * np.sin(ph))
            for k in range(n_ant):
                g = w * tx[p, k]
                for a in range(n_rows):
                    for b in range(n_cols):
                        out[t, k, a, b] += g * rx[p, a, b]
    return out


# ---------------------------------------------------------------------------
# 2-D cross-correlation (NCHW), forward and backward
# ---------------------------------------------------------------------------

def conv_out_size(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward_numpy(x, w, stride, padding):
    k = w.shape[2]
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, Ho, Wo, k, k)
    return np.ascontiguousarray(np.einsum("bchwij,ocij->bohw", win, w, optimize=True))


def conv2d_backward_numpy(x, w, dy, stride, padding):
    """Return ``(dx, dw)`` for ``y = conv2d_forward(x, w)``."""
    k = w.shape[2]
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("bohw,bchwij->ocij", dy, win, optimize=True)
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("bohw,oc->bchw", dy, w[:, :, i, j], optimize=True)
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw


@njit
def conv2d_forward_numba(x, w, stride, padding):
    nb, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((nb, c_out, ho, wo), dtype=x.dtype)
    for b in range(nb):
        for o in range(c_out):
            for c in range(c_in):
                for i in range(k):
                    for j in range(k):
                        wv = w[o, c, i, j]
                        for r in range(ho):
                            hi = r * stride + i - padding
                            if hi < 0 or hi >= h:
                                continue
                            for s in range(wo):
                                wi = s * stride + j - padding
                                if wi < 0 or wi >= wd:
                                    continue
                                y[b, o, r, s] += wv * x[b, c, hi, wi]
    return y


@njit
def conv2d_backward_numba(x, w, dy, stride, padding):
    nb, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = dy.shape[2]
    wo = dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for b in range(nb):
        for o in range(c_out):
            for c in range(c_in):
                for i in range(k):
                    for j in range(k):
                        wv = w[o, c, i, j]
                        acc = 0.0
                        for r in range(ho):
                            hi = r * stride + i - padding
                            if hi < 0 or hi >= h:
                                continue
                            for s in range(wo):
                                wi = s * stride + j - padding
                                if wi < 0 or wi >= wd:
                                    continue
                                g = dy[b, o, r, s]
                                acc += g * x[b, c, hi, wi]
                                dx[b, c, hi, wi] += g * wv
                        dw[o, c, i, j] += acc
    return dx, dw


# ---------------------------------------------------------------------------
# port search: argmin over (n, m) of sum_i |pred_i - ref_i|
# ---------------------------------------------------------------------------

def port_argmin_numpy(pred, ref):
    """Flat row-major index of the first minimiser of ``sum_i |pred_i - ref_i|``.

    ``pred`` and ``ref`` are ``(..., Nt, N, M)``; the leading axes are batched.
    """
    dist = np.abs(pred - ref).sum(axis=-3)
    flat = dist.reshape(dist.shape[:-2] + (-1,))
    return np.argmin(flat, axis=-1)


@njit
def _port_argmin_one(pred, ref):
    n_ant, n_rows, n_cols = pred.shape
    best = np.inf
    best_idx = 0
    for a in range(n_rows):
        for b in range(n_cols):
            acc = 0.0
            for i in range(n_ant):
                acc += abs(pred[i, a, b] - ref[i, a, b])
            if acc < best:
                best = acc
                best_idx = a * n_cols + b
    return best_idx


@njit
def _port_argmin_batch(pred, ref):
    nb = pred.shape[0]
    out = np.empty(nb, dtype=np.int64)
    for b in range(nb):
        out[b] = _port_argmin_one(pred[b], ref[b])
    return out


def port_argmin_numba(pred, ref):
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    lead = pred.shape[:-3]
    flat_pred = np.ascontiguousarray(pred.reshape((-1,) + pred.shape[-3:]), dtype=np.complex128)
    flat_ref = np.ascontiguousarray(ref.reshape((-1,) + ref.shape[-3:]), dtype=np.complex128)
    out = _port_argmin_batch(flat_pred, flat_ref)
    if not lead:
        return out[0]
    return out.reshape(lead)


if USE_NUMBA:
    synth_tables = synth_tables_numba
    conv2d_forward = conv2d_forward_numba
    conv2d_backward = conv2d_backward_numba
    port_argmin = port_argmin_numba
else:
    synth_tables = synth_tables_numpy
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    port_argmin = port_argmin_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
