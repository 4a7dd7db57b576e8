# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: fused loops over contiguous float64 buffers.

Semantics mirror ``pybackend`` (see its docstring for the conventions).
Loops accumulate in fixed index order, so results are deterministic; they
agree with the numpy backend to rounding, not bit-for-bit, because the
summation orders differ.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p, sqrt, tanh

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double z
    if x >= 0.0:
        z = exp(-x)
        return 1.0 / (1.0 + z)
    z = exp(x)
    return z / (1.0 + z)


def linear_fwd(double[:, ::1] x, double[:, ::1] w, double[::1] b):
    cdef Py_ssize_t n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    out_arr = np.empty((n, dout))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, o, k
    cdef double acc
    for i in range(n):
        for o in range(dout):
            acc = b[o]
            for k in range(din):
                acc += x[i, k] * w[o, k]
            out[i, o] = acc
    return out_arr


def linear_bwd(double[:, ::1] x, double[:, ::1] w, double[:, ::1] dy, bint need_dx=True):
    cdef Py_ssize_t n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    dw_arr = np.zeros((dout, din))
    db_arr = np.zeros(dout)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dx
    cdef Py_ssize_t i, o, k
    cdef double g
    for i in range(n):
        for o in range(dout):
            g = dy[i, o]
            db[o] += g
            for k in range(din):
                dw[o, k] += g * x[i, k]
    if not need_dx:
        return None, dw_arr, db_arr
    dx_arr = np.zeros((n, din))
    dx = dx_arr
    for i in range(n):
        for o in range(dout):
            g = dy[i, o]
            for k in range(din):
                dx[i, k] += g * w[o, k]
    return dx_arr, dw_arr, db_arr


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], inner = a.shape[1], m = b.shape[1]
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(n):
        for k in range(inner):
            aik = a[i, k]
            for j in range(m):
                out[i, j] += aik * b[k, j]
    return out_arr


def tanh_fwd(x):
    x_arr = np.ascontiguousarray(x)
    out_arr = np.empty_like(x_arr)
    cdef double[::1] xv = x_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = tanh(xv[i])
    return out_arr


def tanh_bwd(y, dy):
    y_arr = np.ascontiguousarray(y)
    dy_arr = np.ascontiguousarray(dy)
    out_arr = np.empty_like(y_arr)
    cdef double[::1] yv = y_arr.reshape(-1)
    cdef double[::1] gv = dy_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(yv.shape[0]):
        ov[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out_arr


def relu_fwd(x):
    x_arr = np.ascontiguousarray(x)
    out_arr = np.empty_like(x_arr)
    cdef double[::1] xv = x_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out_arr


def relu_bwd(x, dy):
    x_arr = np.ascontiguousarray(x)
    dy_arr = np.ascontiguousarray(dy)
    out_arr = np.empty_like(x_arr)
    cdef double[::1] xv = x_arr.reshape(-1)
    cdef double[::1] gv = dy_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out_arr


def sigmoid_fwd(x):
    x_arr = np.ascontiguousarray(x)
    out_arr = np.empty_like(x_arr)
    cdef double[::1] xv = x_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = _sigmoid(xv[i])
    return out_arr


def sigmoid_bwd(y, dy):
    y_arr = np.ascontiguousarray(y)
    dy_arr = np.ascontiguousarray(dy)
    out_arr = np.empty_like(y_arr)
    cdef double[::1] yv = y_arr.reshape(-1)
    cdef double[::1] gv = dy_arr.reshape(-1)
    cdef double[::1] ov = out_arr.reshape(-1)
    cdef Py_ssize_t i
    for i in range(yv.shape[0]):
        ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out_arr


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    out_arr = np.empty((n, c))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(c):
            out[i, j] /= s
    return out_arr


def softmax_xent_fwd(double[:, ::1] logits, long[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    losses_arr = np.empty(n)
    probs_arr = np.empty((n, c))
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            probs[i, j] = exp(logits[i, j] - m)
            s += probs[i, j]
        losses[i] = log(s) + (m - logits[i, labels[i]])
        for j in range(c):
            probs[i, j] /= s
    return losses_arr, probs_arr


def softmax_xent_bwd(double[:, ::1] probs, long[::1] labels, double[::1] wpe):
    cdef Py_ssize_t n = probs.shape[0], c = probs.shape[1]
    out_arr = np.empty((n, c))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double w
    for i in range(n):
        w = wpe[i]
        for j in range(c):
            out[i, j] = probs[i, j] * w
        out[i, labels[i]] -= w
    return out_arr


def bce_logits_fwd(double[::1] z, double[::1] y):
    cdef Py_ssize_t n = z.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double zi
    for i in range(n):
        zi = z[i]
        out[i] = (zi if zi > 0.0 else 0.0) - zi * y[i] + log1p(exp(-fabs(zi)))
    return out_arr


def bce_logits_bwd(double[::1] z, double[::1] y, double[::1] wpe):
    cdef Py_ssize_t n = z.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = (_sigmoid(z[i]) - y[i]) * wpe[i]
    return out_arr


def embed_meanpool_fwd(double[:, ::1] table, long[::1] tokens, long[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1, e = table.shape[1]
    out_arr = np.zeros((n, e))
    lengths_arr = np.empty(n)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] lengths = lengths_arr
    cdef Py_ssize_t b, k, j
    cdef long row
    cdef double inv
    for b in range(n):
        for k in range(offsets[b], offsets[b + 1]):
            row = tokens[k]
            for j in range(e):
                out[b, j] += table[row, j]
        lengths[b] = offsets[b + 1] - offsets[b]
        inv = 1.0 / lengths[b]
        for j in range(e):
            out[b, j] *= inv
    return out_arr, lengths_arr


def embed_meanpool_bwd(double[:, ::1] dout, long[::1] tokens, long[::1] offsets, Py_ssize_t n_rows):
    cdef Py_ssize_t n = offsets.shape[0] - 1, e = dout.shape[1]
    dtable_arr = np.zeros((n_rows, e))
    cdef double[:, ::1] dtable = dtable_arr
    cdef Py_ssize_t b, k, j
    cdef long row
    cdef double inv
    for b in range(n):
        inv = 1.0 / (offsets[b + 1] - offsets[b])
        for k in range(offsets[b], offsets[b + 1]):
            row = tokens[k]
            for j in range(e):
                dtable[row, j] += dout[b, j] * inv
    return dtable_arr


def adam_step(param, grad, m, v, long t, double lr, double beta1,
              double beta2, double eps, double weight_decay):
    cdef double[::1] p = param.reshape(-1)
    cdef double[::1] g = np.ascontiguousarray(grad).reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double shrink = 1.0 - lr * weight_decay
    cdef double mhat, vhat
    for i in range(n):
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * g[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = mv[i] / bc1
        vhat = vv[i] / bc2
        p[i] -= lr * mhat / (sqrt(vhat) + eps)
        if weight_decay > 0.0:
            p[i] *= shrink
    return None
