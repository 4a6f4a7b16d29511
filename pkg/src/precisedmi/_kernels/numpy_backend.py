"""Reference numpy implementations of the network kernels.

This backend defines the semantics; the compiled Cython backend implements
the same contracts and is preferred at import time when available.

Layouts: activations are (batch, channels, length) C-contiguous arrays,
convolution weights are (out_channels, in_channels, 3) with one sample of
zero padding at both ends, pooling indices are absolute positions along the
length axis. All kernels preserve the dtype of their inputs (float32 for
production, float64 for gradient checking).
"""

import numpy as np


def _windows(a):
    # sliding length-3 windows over the last axis of a padded array
    s0, s1, s2 = a.strides
    b, c, lp = a.shape
    return np.lib.stride_tricks.as_strided(a, (b, c, lp - 2, 3), (s0, s1, s2, s2))


def conv1d_forward(x, w, b):
    """Same-length 1D convolution with kernel size 3 and zero padding 1."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    y = np.tensordot(_windows(xp), w, axes=([1, 3], [1, 2]))  # (B, L, Cout)
    y += b
    return np.ascontiguousarray(y.transpose(0, 2, 1))


def conv1d_backward(x, w, gy, need_gx=True):
    """Gradients of conv1d_forward w.r.t. input, weights and bias."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    gb = gy.sum(axis=(0, 2))
    gw = np.tensordot(gy, _windows(xp), axes=([0, 2], [0, 2]))  # (Cout, Cin, 3)
    gx = None
    if need_gx:
        gyp = np.pad(gy, ((0, 0), (0, 0), (1, 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1])
        gx = np.tensordot(_windows(gyp), wf, axes=([1, 3], [0, 2]))  # (B, L, Cin)
        gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
    return gx, gw, gb


def prelu_forward(x, slope):
    sl = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x > 0, x, sl * x)


def prelu_backward(x, slope, gy):
    sl = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    gx = np.where(x > 0, gy, sl * gy)
    neg = np.where(x > 0, np.zeros((), dtype=x.dtype), x)
    axes = (0,) + tuple(range(2, x.ndim))
    gs = (gy * neg).sum(axis=axes)
    return gx, gs


def maxpool_forward(x, width):
    """Non-overlapping max pooling; ties resolve to the first index."""
    b, c, l = x.shape
    if l % width:
        raise ValueError(f"length {l} not divisible by pool width {width}")
    xr = x.reshape(b, c, l // width, width)
    rel = xr.argmax(axis=3)
    y = np.take_along_axis(xr, rel[..., None], axis=3)[..., 0]
    idx = rel + np.arange(l // width)[None, None, :] * width
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool_backward(idx, gy, length):
    b, c, _ = gy.shape
    gx = np.zeros((b, c, length), dtype=gy.dtype)
    np.put_along_axis(gx, idx, gy, axis=2)
    return gx


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """One bias-corrected Adam update, in place on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    c1 = 1.0 / (1.0 - beta1 ** step)
    c2 = 1.0 / (1.0 - beta2 ** step)
    param -= lr * (m * c1) / (np.sqrt(v * c2) + eps)
