"""Forward/backward kernels for the layer types used by the U-Net.

Tensors are channels-last, shape (N, H, W, C); this keeps the im2col matrix
row-major per pixel, which is the fast orientation for the BLAS GEMMs.
Weights use the conventional (C_out, C_in, kh, kw) layout ((C_in, C_out, 2, 2)
for the transposed convolution) so model files stay layout-independent.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. Arithmetic follows the input
dtype, so the same kernels serve float64 gradient checks and float32 training.
"""

import math

import numpy as np
from scipy.special import ndtr

from artifact.errors import ShapeError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def conv2d_forward(x, w, b, pad=1):
    """Stride-1 cross-correlation with symmetric zero padding.

    Parameters
    ----------
    x : ndarray, shape (N, H, W, C)
    w : ndarray, shape (O, C, kh, kw)
    b : ndarray, shape (O,)
    pad : int
        Zero padding applied on every side.

    Returns
    -------
    out : ndarray, shape (N, H + 2*pad - kh + 1, W + 2*pad - kw + 1, O)
    cache : tuple
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d kernel larger than padded input")

    if kh == kw == 1 and pad == 0:
        cols = x.reshape(n * h * wd, c)
    elif o < c:
        return _conv_shift_forward(x, w, b, pad, ho, wo)
    else:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i * kw + j, :] = xp[:, i:i + ho, j:j + wo, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o))
    out = (cols @ wmat).reshape(n, ho, wo, o)
    out += b
    return out, ("im2col", x.shape, w.shape, pad, cols, wmat)


def _conv_shift_forward(x, w, b, pad, ho, wo):
    # fewer outputs than inputs: multiply every padded pixel by all taps at once
    # (kh*kw*O columns instead of kh*kw*C), then add the shifted tap outputs
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    hp, wp = xp.shape[1:3]
    wall = np.ascontiguousarray(w.transpose(1, 2, 3, 0).reshape(c, kh * kw * o))
    y = (xp.reshape(n * hp * wp, c) @ wall).reshape(n, hp, wp, kh * kw, o)
    out = np.empty((n, ho, wo, o), dtype=y.dtype)
    out[...] = b
    for i in range(kh):
        for j in range(kw):
            out += y[:, i:i + ho, j:j + wo, i * kw + j, :]
    return out, ("shift", x.shape, w.shape, pad, xp, wall)


def conv2d_backward(dout, cache, need_dx=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false.
    """
    if cache[0] == "shift":
        return _conv_shift_backward(dout, cache, need_dx)
    _, x_shape, w_shape, pad, cols, wmat = cache
    n, h, wd, c = x_shape
    o, _, kh, kw = w_shape
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(n * ho * wo, o)

    dw = (cols.T @ d2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db

    dcols = d2 @ wmat.T
    if kh == kw == 1 and pad == 0:
        return dcols.reshape(n, h, wd, c), np.ascontiguousarray(dw), db
    dcols = dcols.reshape(n, ho, wo, kh * kw, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i * kw + j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def _conv_shift_backward(dout, cache, need_dx):
    # dout placed at every tap offset of the padded grid serves both gradients
    _, x_shape, w_shape, pad, xp, wall = cache
    n, h, wd, c = x_shape
    o, _, kh, kw = w_shape
    hp, wp = xp.shape[1:3]
    ho, wo = dout.shape[1], dout.shape[2]
    D = np.zeros((n, hp, wp, kh * kw, o), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            D[:, i:i + ho, j:j + wo, i * kw + j, :] = dout
    D = D.reshape(n * hp * wp, kh * kw * o)
    dw = (xp.reshape(n * hp * wp, c).T @ D).reshape(c, kh, kw, o).transpose(3, 0, 1, 2)
    db = dout.reshape(-1, o).sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dxp = (D @ wall.T).reshape(n, hp, wp, c)
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def conv1x1_forward(x, w, b):
    return conv2d_forward(x, w, b, pad=0)


def conv1x1_backward(dout, cache, need_dx=True):
    return conv2d_backward(dout, cache, need_dx=need_dx)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    return x * ndtr(x)


def gelu_grad(x):
    """Derivative ``Phi(x) + x * phi(x)``."""
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu_forward(x):
    cdf = ndtr(x)
    return x * cdf, (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    return dout * (cdf + x * np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI))


def maxpool2x2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 max pooling needs even height and width, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum, i.e. the top-left element on ties
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(dout, cache):
    shape, idx = cache
    n, h, w, c = shape
    dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(n, h, w, c)


def convtranspose2x2_forward(x, w, b):
    """Transposed convolution with a 2x2 kernel and stride 2.

    ``w`` has shape (C_in, C_out, 2, 2); each input pixel writes one
    non-overlapping 2x2 output block, so height and width double.
    """
    n, h, wd, c = x.shape
    ci, o, kh, kw = w.shape
    if ci != c or (kh, kw) != (2, 2):
        raise ShapeError(f"transposed conv expects weight (C_in={c}, C_out, 2, 2), got {w.shape}")
    if b.shape != (o,):
        raise ShapeError(f"transposed conv bias shape {b.shape} does not match {o} channels")
    x2 = x.reshape(n * h * wd, c)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(c, 4 * o))
    y = (x2 @ wmat).reshape(n, h, wd, 2, 2, o).transpose(0, 1, 3, 2, 4, 5)
    out = y.reshape(n, 2 * h, 2 * wd, o) + b
    return out, (x.shape, x2, wmat)


def convtranspose2x2_backward(dout, cache):
    x_shape, x2, wmat = cache
    n, h, wd, c = x_shape
    o = dout.shape[3]
    d = dout.reshape(n, h, 2, wd, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * wd, 4 * o)
    dw = (x2.T @ d).reshape(c, 2, 2, o).transpose(0, 3, 1, 2)
    dx = (d @ wmat.T).reshape(n, h, wd, c)
    db = d.reshape(-1, 4, o).sum(axis=(0, 1))
    return dx, np.ascontiguousarray(dw), db


def concat_channels(a, b):
    """Concatenate along channels; returns the result and the split index."""
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=3), a.shape[3]


def split_backward(dout, split_at):
    return dout[..., :split_at], dout[..., split_at:]
