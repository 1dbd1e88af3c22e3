# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``; identical signatures."""
import numpy as np

from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double

BACKEND = "cython"


def conv1d_forward(real[:, ::1] x, real[:, :, ::1] w, real[::1] b, Py_ssize_t dilation):
    cdef Py_ssize_t cin = x.shape[0], t = x.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t half = (k - 1) // 2
    cdef Py_ssize_t o, c, j, s, off, lo, hi
    cdef real wv
    if real is float:
        out_arr = np.empty((cout, t), dtype=np.float32)
    else:
        out_arr = np.empty((cout, t), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for o in range(cout):
            for s in range(t):
                out[o, s] = b[o]
            for c in range(cin):
                for j in range(k):
                    wv = w[o, c, j]
                    off = (j - half) * dilation
                    lo = -off if off < 0 else 0
                    hi = t - off if off > 0 else t
                    for s in range(lo, hi):
                        out[o, s] += wv * x[c, s + off]
    return out_arr


def conv1d_backward(real[:, ::1] grad, real[:, ::1] x, real[:, :, ::1] w, Py_ssize_t dilation):
    cdef Py_ssize_t cin = x.shape[0], t = x.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t half = (k - 1) // 2
    cdef Py_ssize_t o, c, j, s, off, lo, hi
    cdef real wv, acc
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gx_arr = np.zeros((cin, t), dtype=dt)
    gw_arr = np.empty((cout, cin, k), dtype=dt)
    gb_arr = np.empty(cout, dtype=dt)
    cdef real[:, ::1] gx = gx_arr
    cdef real[:, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr
    with nogil:
        for o in range(cout):
            acc = 0
            for s in range(t):
                acc = acc + grad[o, s]
            gb[o] = acc
            for c in range(cin):
                for j in range(k):
                    wv = w[o, c, j]
                    off = (j - half) * dilation
                    lo = -off if off < 0 else 0
                    hi = t - off if off > 0 else t
                    acc = 0
                    for s in range(lo, hi):
                        acc = acc + grad[o, s] * x[c, s + off]
                        gx[c, s + off] += wv * grad[o, s]
                    gw[o, c, j] = acc
    return gx_arr, gw_arr, gb_arr


def attention_forward(real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                      unsigned char[::1] mask, Py_ssize_t window):
    cdef Py_ssize_t t = q.shape[0], d = q.shape[1]
    if window > t:
        window = t
    if window < 1:
        window = 1
    cdef Py_ssize_t nc = (t + window - 1) // window
    cdef Py_ssize_t ci, c0, n, i, j, e
    cdef double scale = 1.0 / sqrt(<double>d)
    cdef double top, acc, total
    cdef bint seen
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    out_arr = np.zeros((t, d), dtype=dt)
    probs_arr = np.zeros((nc, window, window), dtype=dt)
    cdef real[:, ::1] out = out_arr
    cdef real[:, :, ::1] probs = probs_arr
    with nogil:
        for ci in range(nc):
            c0 = ci * window
            n = t - c0 if t - c0 < window else window
            for i in range(n):
                if not mask[c0 + i]:
                    continue
                seen = False
                top = 0
                for j in range(n):
                    if not mask[c0 + j]:
                        continue
                    acc = 0
                    for e in range(d):
                        acc = acc + q[c0 + i, e] * k[c0 + j, e]
                    acc = acc * scale
                    probs[ci, i, j] = <real>acc
                    if not seen or acc > top:
                        top = acc
                        seen = True
                total = 0
                for j in range(n):
                    if mask[c0 + j]:
                        acc = exp(probs[ci, i, j] - top)
                        probs[ci, i, j] = <real>acc
                        total = total + acc
                for j in range(n):
                    if mask[c0 + j]:
                        probs[ci, i, j] = <real>(probs[ci, i, j] / total)
                for j in range(n):
                    if mask[c0 + j]:
                        for e in range(d):
                            out[c0 + i, e] += probs[ci, i, j] * v[c0 + j, e]
    return out_arr, probs_arr


def attention_backward(real[:, ::1] grad, real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                       real[:, :, ::1] probs, Py_ssize_t window):
    cdef Py_ssize_t t = q.shape[0], d = q.shape[1]
    if window > t:
        window = t
    if window < 1:
        window = 1
    cdef Py_ssize_t nc = probs.shape[0]
    cdef Py_ssize_t ci, c0, n, i, j, e
    cdef double scale = 1.0 / sqrt(<double>d)
    cdef double dot, gpj, gs, p
    if real is float:
        dt = np.float32
    else:
        dt = np.float64
    gq_arr = np.zeros((t, d), dtype=dt)
    gk_arr = np.zeros((t, d), dtype=dt)
    gv_arr = np.zeros((t, d), dtype=dt)
    cdef real[:, ::1] gq = gq_arr
    cdef real[:, ::1] gk = gk_arr
    cdef real[:, ::1] gv = gv_arr
    # grad_i . v_j for the current row, reused by the softmax backward
    cdef double[::1] gp = np.zeros(window, dtype=np.float64)
    with nogil:
        for ci in range(nc):
            c0 = ci * window
            n = t - c0 if t - c0 < window else window
            for i in range(n):
                dot = 0
                for j in range(n):
                    p = probs[ci, i, j]
                    if p == 0:
                        continue
                    gpj = 0
                    for e in range(d):
                        gpj = gpj + grad[c0 + i, e] * v[c0 + j, e]
                        gv[c0 + j, e] += <real>(p * grad[c0 + i, e])
                    gp[j] = gpj
                    dot = dot + p * gpj
                for j in range(n):
                    p = probs[ci, i, j]
                    if p == 0:
                        continue
                    gs = p * (gp[j] - dot) * scale
                    for e in range(d):
                        gq[c0 + i, e] += <real>(gs * k[c0 + j, e])
                        gk[c0 + j, e] += <real>(gs * q[c0 + i, e])
    return gq_arr, gk_arr, gv_arr
