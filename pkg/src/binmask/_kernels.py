"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled with ``numba.njit`` and a
vectorized numpy version. The numba path is used when numba imports and the
environment variable ``BINMASK_NUMBA`` is not ``"0"``. Both paths are
deterministic; they agree to float rounding but not bitwise, so a run should
stick to one path.

Loop kernels operate on 2-D row-major arrays (callers reshape), reduce
left-to-right and never use fastmath or parallel loops.
"""
import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("BINMASK_NUMBA", "1") != "0"

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _jit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# loop kernels (numba)
# --------------------------------------------------------------------------

@_jit
def _softmax_rows_loop(x):
    rows, cols = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        for c in range(cols):
            out[r, c] = out[r, c] / s
    return out


@_jit
def _softmax_rows_bwd_loop(y, gy):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += gy[r, c] * y[r, c]
        for c in range(cols):
            gx[r, c] = y[r, c] * (gy[r, c] - dot)
    return gx


@_jit
def _layer_norm_loop(x, gain, bias, eps):
    rows, cols = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            dlt = x[r, c] - mu
            var += dlt * dlt
        var /= cols
        inv = 1.0 / math.sqrt(var + eps)
        rstd[r] = inv
        for c in range(cols):
            h = (x[r, c] - mu) * inv
            xhat[r, c] = h
            y[r, c] = h * gain[c] + bias[c]
    return y, xhat, rstd


@_jit
def _layer_norm_bwd_loop(gy, xhat, rstd, gain):
    rows, cols = gy.shape
    gx = np.empty_like(gy)
    ggain = np.zeros(cols, dtype=np.float64)
    gbias = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for c in range(cols):
            g = gy[r, c] * gain[c]
            s1 += g
            s2 += g * xhat[r, c]
            ggain[c] += gy[r, c] * xhat[r, c]
            gbias[c] += gy[r, c]
        s1 /= cols
        s2 /= cols
        for c in range(cols):
            g = gy[r, c] * gain[c]
            gx[r, c] = rstd[r] * (g - s1 - xhat[r, c] * s2)
    return gx, ggain, gbias


@_jit
def _gelu_loop(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    cdf = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        c = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
        cdf[i] = c
        out[i] = v * c
    return out.reshape(x.shape), cdf.reshape(x.shape)


@_jit
def _gelu_bwd_loop(x, cdf, gy):
    fx = x.ravel()
    fc = cdf.ravel()
    fg = gy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
        out[i] = fg[i] * (fc[i] + v * pdf)
    return out.reshape(x.shape)


@_jit
def _masked_weight_loop(w, scores, tau):
    rows, cols = w.shape
    what = np.empty_like(w)
    mask = np.empty((rows, cols), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            if scores[r, c] >= tau:
                mask[r, c] = 1
                what[r, c] = w[r, c]
            else:
                mask[r, c] = 0
                what[r, c] = w[r, c] * 0.0
    return what, mask


@_jit
def _pack_bits_loop(bits):
    n = bits.size
    nbytes = (n + 7) // 8
    out = np.empty(nbytes, dtype=np.uint8)
    full = n // 8
    for j in range(full):
        b = 0
        base = j * 8
        for k in range(8):
            b |= (bits[base + k] & 1) << k
        out[j] = b
    if nbytes > full:
        b = 0
        for k in range(n - full * 8):
            b |= (bits[full * 8 + k] & 1) << k
        out[full] = b
    return out


@_jit
def _unpack_bits_loop(payload, n):
    out = np.empty(n, dtype=np.uint8)
    full = n // 8
    for j in range(full):
        b = payload[j]
        base = j * 8
        for k in range(8):
            out[base + k] = (b >> k) & 1
    for i in range(full * 8, n):
        out[i] = (payload[i >> 3] >> (i & 7)) & 1
    return out


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------

def _softmax_rows_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_bwd_np(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def _layer_norm_np(x, gain, bias, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * rstd).astype(x.dtype)
    return (xhat * gain + bias).astype(x.dtype), xhat, rstd[:, 0].astype(x.dtype)


def _layer_norm_bwd_np(gy, xhat, rstd, gain):
    g = gy * gain
    s1 = g.mean(axis=-1, keepdims=True)
    s2 = (g * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[:, None] * (g - s1 - xhat * s2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def _gelu_np(x):
    cdf = (0.5 * (1.0 + _erf(x * _SQRT1_2))).astype(x.dtype, copy=False)
    return x * cdf, cdf


def _gelu_bwd_np(x, cdf, gy):
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return gy * (cdf + x * pdf)


def _masked_weight_np(w, scores, tau):
    mask = (scores >= tau).astype(np.uint8)
    return w * mask.astype(w.dtype), mask


def _pack_bits_np(bits):
    return np.packbits(bits.astype(np.uint8), bitorder="little")


def _unpack_bits_np(payload, n):
    return np.unpackbits(payload, count=n, bitorder="little")


# --------------------------------------------------------------------------
# public dispatch
# --------------------------------------------------------------------------

def _as2d(x):
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def softmax_lastdim(x, use_numba=None):
    fn = _softmax_rows_loop if _pick(use_numba) else _softmax_rows_np
    return fn(_as2d(x)).reshape(x.shape)


def softmax_lastdim_bwd(y, gy, use_numba=None):
    fn = _softmax_rows_bwd_loop if _pick(use_numba) else _softmax_rows_bwd_np
    return fn(_as2d(y), _as2d(gy)).reshape(y.shape)


def layer_norm_lastdim(x, gain, bias, eps, use_numba=None):
    """Returns ``(y, xhat, rstd)``; ``xhat`` and ``rstd`` feed the backward."""
    x2 = _as2d(x)
    if _pick(use_numba):
        y, xhat, rstd = _layer_norm_loop(x2, gain.astype(x.dtype), bias.astype(x.dtype), float(eps))
    else:
        y, xhat, rstd = _layer_norm_np(x2, gain.astype(x.dtype), bias.astype(x.dtype), eps)
    return y.reshape(x.shape), xhat, rstd


def layer_norm_lastdim_bwd(gy, xhat, rstd, gain, use_numba=None):
    gy2 = _as2d(gy)
    if _pick(use_numba):
        gx, gg, gb = _layer_norm_bwd_loop(gy2, xhat, rstd, gain.astype(gy.dtype))
    else:
        gx, gg, gb = _layer_norm_bwd_np(gy2, xhat, rstd, gain.astype(gy.dtype))
    dt = gy.dtype
    return gx.reshape(gy.shape), gg.astype(dt), gb.astype(dt)


def gelu(x, use_numba=None):
    """Exact GELU; returns ``(y, cdf)`` where ``cdf`` is kept for the backward."""
    if _pick(use_numba):
        return _gelu_loop(np.ascontiguousarray(x))
    return _gelu_np(x)


def gelu_bwd(x, cdf, gy, use_numba=None):
    if _pick(use_numba):
        return _gelu_bwd_loop(np.ascontiguousarray(x), cdf, np.ascontiguousarray(gy, dtype=x.dtype))
    return _gelu_bwd_np(x, cdf, gy).astype(x.dtype, copy=False)


def masked_weight(w, scores, tau, use_numba=None):
    """Fused binarize + Hadamard: returns ``(w * mask, mask)`` with mask as uint8."""
    w = np.ascontiguousarray(w)
    scores = np.ascontiguousarray(scores)
    if _pick(use_numba):
        return _masked_weight_loop(w, scores, float(tau))
    return _masked_weight_np(w, scores, tau)


def pack_bits(bits, use_numba=None):
    """LSB-first packing of a flat 0/1 array, zero-padded to a byte boundary."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
    if _pick(use_numba):
        return _pack_bits_loop(bits)
    return _pack_bits_np(bits)


def unpack_bits(payload, n, use_numba=None):
    payload = np.ascontiguousarray(payload, dtype=np.uint8)
    if _pick(use_numba):
        return _unpack_bits_loop(payload, int(n))
    return _unpack_bits_np(payload, int(n))


def _pick(use_numba):
    if use_numba is None:
        return USE_NUMBA
    return bool(use_numba) and _HAVE_NUMBA
