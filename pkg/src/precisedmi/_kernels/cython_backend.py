"""Allocating wrappers over the compiled kernels.

Import fails cleanly when the extension was not built; the package then
falls back to the numpy backend.
"""

import numpy as np

from . import _cykernels as _ck


def _c(a):
    return np.ascontiguousarray(a)


def conv1d_forward(x, w, b):
    x = _c(x)
    y = np.empty((x.shape[0], w.shape[0], x.shape[2]), dtype=x.dtype)
    _ck.conv1d_forward(x, _c(w), _c(b), y)
    return y


def conv1d_backward(x, w, gy, need_gx=True):
    x, gy = _c(x), _c(gy)
    gw = np.empty_like(w)
    gb = np.empty(w.shape[0], dtype=w.dtype)
    _ck.conv1d_backward_wb(x, gy, gw, gb)
    gx = None
    if need_gx:
        gx = np.empty_like(x)
        _ck.conv1d_backward_x(_c(w), gy, gx)
    return gx, gw, gb


def _as3d(a):
    return a if a.ndim == 3 else a[:, :, None]


def prelu_forward(x, slope):
    x3 = _c(_as3d(x))
    y = np.empty_like(x3)
    _ck.prelu_forward(x3, _c(slope), y)
    return y.reshape(x.shape)


def prelu_backward(x, slope, gy):
    x3 = _c(_as3d(x))
    gy3 = _c(_as3d(gy))
    gx = np.empty_like(x3)
    gs = np.empty_like(slope)
    _ck.prelu_backward(x3, _c(slope), gy3, gx, gs)
    return gx.reshape(x.shape), gs


def maxpool_forward(x, width):
    b, c, l = x.shape
    if l % width:
        raise ValueError(f"length {l} not divisible by pool width {width}")
    x = _c(x)
    y = np.empty((b, c, l // width), dtype=x.dtype)
    idx = np.empty((b, c, l // width), dtype=np.int64)
    _ck.maxpool_forward(x, width, y, idx)
    return y, idx


def maxpool_backward(idx, gy, length):
    b, c, _ = gy.shape
    gx = np.zeros((b, c, length), dtype=gy.dtype)
    _ck.maxpool_backward(_c(idx), _c(gy), gx)
    return gx


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 / (1.0 - beta1 ** step)
    c2 = 1.0 / (1.0 - beta2 ** step)
    _ck.adam_update(param.ravel(), _c(grad.ravel()), m.ravel(), v.ravel(),
                    lr, beta1, beta2, eps, c1, c2)
