# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pointwise kernels; same contract as ``_pykernels``."""
import numpy as np

from libc.math cimport exp, expm1, fabs, copysign, fmin, fmax

cdef enum:
    SIGMOID = 0
    TANH = 1
    RELU = 2
    LEAKY_RELU = 3


cdef inline double _sigmoid(double x) noexcept nogil:
    # clamped so exp never overflows; branch-free keeps the loops vectorizable
    return 1.0 / (1.0 + exp(-fmax(fmin(x, 700.0), -700.0)))


cdef inline double tanh(double x) noexcept nogil:
    # glibc's vector tanh is slow; expm1 keeps full relative accuracy near 0
    cdef double e = expm1(-2.0 * fmin(fabs(x), 40.0))
    return copysign(-e / (2.0 + e), x)


def sigmoid(x):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t k
    with nogil:
        for k in range(xv.shape[0]):
            ov[k] = _sigmoid(xv[k])
    return out.reshape(np.shape(x))


def act_forward(int kind, x, double slope):
    if kind < 0 or kind > 3:
        raise ValueError(f"unknown activation code {kind}")
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t k, m = xv.shape[0]
    cdef double v
    with nogil:
        if kind == SIGMOID:
            for k in range(m):
                ov[k] = _sigmoid(xv[k])
        elif kind == TANH:
            for k in range(m):
                ov[k] = tanh(xv[k])
        elif kind == RELU:
            for k in range(m):
                v = xv[k]
                ov[k] = v if v > 0 else 0.0
        else:
            for k in range(m):
                v = xv[k]
                ov[k] = v if v >= 0 else slope * v
    return out.reshape(np.shape(x))


def act_backward(int kind, x, y, dy, double slope):
    if kind < 0 or kind > 3:
        raise ValueError(f"unknown activation code {kind}")
    shape = np.shape(dy)
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    cdef double[::1] dv = np.ascontiguousarray(dy, dtype=np.float64).reshape(-1)
    out = np.empty(dv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t k, m = dv.shape[0]
    with nogil:
        if kind == SIGMOID:
            for k in range(m):
                ov[k] = dv[k] * yv[k] * (1.0 - yv[k])
        elif kind == TANH:
            for k in range(m):
                ov[k] = dv[k] * (1.0 - yv[k] * yv[k])
        elif kind == RELU:
            for k in range(m):
                ov[k] = dv[k] if xv[k] > 0 else 0.0
        else:
            for k in range(m):
                ov[k] = dv[k] if xv[k] >= 0 else slope * dv[k]
    return out.reshape(shape)


def lstm_pointwise_forward(pre, c_prev):
    cdef double[:, ::1] p = np.ascontiguousarray(pre, dtype=np.float64)
    cdef double[:, ::1] cp = np.ascontiguousarray(c_prev, dtype=np.float64)
    cdef Py_ssize_t B = cp.shape[0], n = cp.shape[1], b, j
    if p.shape[0] != B or p.shape[1] != 4 * n:
        raise ValueError("pre-activation shape does not match cell state")
    gates_a = np.empty((B, 4 * n))
    c_a = np.empty((B, n))
    tc_a = np.empty((B, n))
    h_a = np.empty((B, n))
    cdef double[:, ::1] gt = gates_a
    cdef double[:, ::1] c = c_a
    cdef double[:, ::1] tc = tc_a
    cdef double[:, ::1] h = h_a
    with nogil:
        for b in range(B):
            for j in range(3 * n):
                gt[b, j] = _sigmoid(p[b, j])
            for j in range(3 * n, 4 * n):
                gt[b, j] = tanh(p[b, j])
            for j in range(n):
                c[b, j] = gt[b, j] * cp[b, j] + gt[b, n + j] * gt[b, 3 * n + j]
            for j in range(n):
                tc[b, j] = tanh(c[b, j])
            for j in range(n):
                h[b, j] = gt[b, 2 * n + j] * tc[b, j]
    return gates_a, c_a, tc_a, h_a


def lstm_pointwise_backward(dc, dh, gates, c_prev, tanh_c):
    cdef double[:, ::1] gt = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, ::1] cp = np.ascontiguousarray(c_prev, dtype=np.float64)
    cdef double[:, ::1] tc = np.ascontiguousarray(tanh_c, dtype=np.float64)
    cdef Py_ssize_t B = cp.shape[0], n = cp.shape[1], b, j
    cdef bint has_dc = dc is not None
    cdef bint has_dh = dh is not None
    cdef double[:, ::1] dcv
    cdef double[:, ::1] dhv
    if has_dc:
        dcv = np.ascontiguousarray(dc, dtype=np.float64)
    if has_dh:
        dhv = np.ascontiguousarray(dh, dtype=np.float64)
    dpre_a = np.empty((B, 4 * n))
    dcp_a = np.empty((B, n))
    cdef double[:, ::1] dp = dpre_a
    cdef double[:, ::1] dcp = dcp_a
    cdef double f, i, o, g, t, d, hgrad
    with nogil:
        for b in range(B):
            for j in range(n):
                f = gt[b, j]
                i = gt[b, n + j]
                o = gt[b, 2 * n + j]
                g = gt[b, 3 * n + j]
                t = tc[b, j]
                d = dcv[b, j] if has_dc else 0.0
                if has_dh:
                    hgrad = dhv[b, j]
                    d = d + hgrad * o * (1.0 - t * t)
                    dp[b, 2 * n + j] = hgrad * t * o * (1.0 - o)
                else:
                    dp[b, 2 * n + j] = 0.0
                dp[b, j] = d * cp[b, j] * f * (1.0 - f)
                dp[b, n + j] = d * g * i * (1.0 - i)
                dp[b, 3 * n + j] = d * i * (1.0 - g * g)
                dcp[b, j] = d * f
    return dpre_a, dcp_a
