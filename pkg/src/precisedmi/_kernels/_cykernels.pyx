# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled network kernels; numpy_backend defines the reference semantics.

All functions write into caller-allocated output arrays. The fused `real`
type instantiates float32 and float64 variants of every kernel.
"""
from libc.math cimport sqrt

ctypedef fused real:
    float
    double


def conv1d_forward(real[:, :, ::1] x, real[:, :, ::1] w, real[::1] b,
                   real[:, :, ::1] y):
    cdef Py_ssize_t nb = x.shape[0], ci = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t ib, ic, oc, i
    cdef real w0, w1, w2, bias
    with nogil:
        for ib in range(nb):
            for oc in range(co):
                bias = b[oc]
                for i in range(n):
                    y[ib, oc, i] = bias
                for ic in range(ci):
                    w0 = w[oc, ic, 0]
                    w1 = w[oc, ic, 1]
                    w2 = w[oc, ic, 2]
                    y[ib, oc, 0] += w1 * x[ib, ic, 0] + w2 * x[ib, ic, 1]
                    for i in range(1, n - 1):
                        y[ib, oc, i] += (w0 * x[ib, ic, i - 1]
                                         + w1 * x[ib, ic, i]
                                         + w2 * x[ib, ic, i + 1])
                    y[ib, oc, n - 1] += w0 * x[ib, ic, n - 2] + w1 * x[ib, ic, n - 1]


def conv1d_backward_wb(real[:, :, ::1] x, real[:, :, ::1] gy,
                       real[:, :, ::1] gw, real[::1] gb):
    # branch-free dot products so the inner loops vectorize
    cdef Py_ssize_t nb = x.shape[0], ci = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t co = gy.shape[1]
    cdef Py_ssize_t ib, ic, oc, i
    cdef real a0, a1, a2, sb
    with nogil:
        for oc in range(co):
            sb = 0
            for ib in range(nb):
                for i in range(n):
                    sb += gy[ib, oc, i]
            gb[oc] = sb
        for oc in range(co):
            for ic in range(ci):
                gw[oc, ic, 0] = 0
                gw[oc, ic, 1] = 0
                gw[oc, ic, 2] = 0
        for ib in range(nb):
            for oc in range(co):
                for ic in range(ci):
                    a0 = 0
                    for i in range(1, n):
                        a0 += gy[ib, oc, i] * x[ib, ic, i - 1]
                    a1 = 0
                    for i in range(n):
                        a1 += gy[ib, oc, i] * x[ib, ic, i]
                    a2 = 0
                    for i in range(n - 1):
                        a2 += gy[ib, oc, i] * x[ib, ic, i + 1]
                    gw[oc, ic, 0] += a0
                    gw[oc, ic, 1] += a1
                    gw[oc, ic, 2] += a2


def conv1d_backward_x(real[:, :, ::1] w, real[:, :, ::1] gy,
                      real[:, :, ::1] gx):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1]
    cdef Py_ssize_t nb = gy.shape[0], n = gy.shape[2]
    cdef Py_ssize_t ib, ic, oc, i
    cdef real w0, w1, w2
    with nogil:
        for ib in range(nb):
            for ic in range(ci):
                for i in range(n):
                    gx[ib, ic, i] = 0
                for oc in range(co):
                    w0 = w[oc, ic, 0]
                    w1 = w[oc, ic, 1]
                    w2 = w[oc, ic, 2]
                    gx[ib, ic, 0] += w1 * gy[ib, oc, 0] + w0 * gy[ib, oc, 1]
                    for i in range(1, n - 1):
                        gx[ib, ic, i] += (w2 * gy[ib, oc, i - 1]
                                          + w1 * gy[ib, oc, i]
                                          + w0 * gy[ib, oc, i + 1])
                    gx[ib, ic, n - 1] += w2 * gy[ib, oc, n - 2] + w1 * gy[ib, oc, n - 1]


def prelu_forward(real[:, :, ::1] x, real[::1] slope, real[:, :, ::1] y):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t ib, ic, i
    cdef real a, xv
    with nogil:
        for ib in range(nb):
            for ic in range(nc):
                a = slope[ic]
                for i in range(n):
                    xv = x[ib, ic, i]
                    y[ib, ic, i] = xv if xv > 0 else a * xv


def prelu_backward(real[:, :, ::1] x, real[::1] slope, real[:, :, ::1] gy,
                   real[:, :, ::1] gx, real[::1] gs):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t ib, ic, i
    cdef real a, xv, g, acc
    with nogil:
        for ic in range(nc):
            a = slope[ic]
            acc = 0
            for ib in range(nb):
                for i in range(n):
                    xv = x[ib, ic, i]
                    g = gy[ib, ic, i]
                    if xv > 0:
                        gx[ib, ic, i] = g
                    else:
                        gx[ib, ic, i] = a * g
                        acc += g * xv
            gs[ic] = acc


def maxpool_forward(real[:, :, ::1] x, Py_ssize_t width,
                    real[:, :, ::1] y, long long[:, :, ::1] idx):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t no = n // width
    cdef Py_ssize_t ib, ic, o, k, base, best_i
    cdef real best, v
    with nogil:
        for ib in range(nb):
            for ic in range(nc):
                for o in range(no):
                    base = o * width
                    best = x[ib, ic, base]
                    best_i = base
                    for k in range(1, width):
                        v = x[ib, ic, base + k]
                        if v > best:
                            best = v
                            best_i = base + k
                    y[ib, ic, o] = best
                    idx[ib, ic, o] = best_i


def maxpool_backward(long long[:, :, ::1] idx, real[:, :, ::1] gy,
                     real[:, :, ::1] gx):
    cdef Py_ssize_t nb = gy.shape[0], nc = gy.shape[1], no = gy.shape[2]
    cdef Py_ssize_t ib, ic, o
    with nogil:
        for ib in range(nb):
            for ic in range(nc):
                for o in range(no):
                    gx[ib, ic, idx[ib, ic, o]] = gy[ib, ic, o]


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double c1, double c2):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double mi, vi, gi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = <real> mi
            v[i] = <real> vi
            p[i] -= <real> (lr * (mi * c1) / (sqrt(vi * c2) + eps))
