# cython: language_level=3
"""Compiled core for the transducer-loss lattice DP.

Mirrors kernels/transducer_np.py cell for cell; the two must agree to
float64 round-off on any input. Keep both in sync when touching either.
"""

from libc.math cimport exp, log1p, isfinite, INFINITY

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _lae(double a, double b) noexcept nogil:
    cdef double t
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a < b:
        t = a
        a = b
        b = t
    return a + log1p(exp(b - a))


cdef void _fill_alpha(double[:, :, ::1] lp, long[::1] labels, int blank,
                      double[:, ::1] alpha) noexcept nogil:
    cdef Py_ssize_t tlen = lp.shape[0]
    cdef Py_ssize_t ulen = lp.shape[1] - 1
    cdef Py_ssize_t t, u
    cdef double via_blank, via_label
    alpha[0, 0] = 0.0
    for t in range(tlen):
        for u in range(ulen + 1):
            if t == 0 and u == 0:
                continue
            via_blank = alpha[t - 1, u] + lp[t - 1, u, blank] if t > 0 else -INFINITY
            via_label = alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else -INFINITY
            alpha[t, u] = _lae(via_blank, via_label)


def forward_alpha(double[:, :, ::1] lp, long[::1] labels, int blank):
    """Forward lattice variables and the sequence loss."""
    cdef Py_ssize_t tlen = lp.shape[0]
    cdef Py_ssize_t ulen = lp.shape[1] - 1
    alpha_arr = np.full((tlen, ulen + 1), -np.inf, dtype=np.float64)
    cdef double[:, ::1] alpha = alpha_arr
    _fill_alpha(lp, labels, blank, alpha)
    cdef double loss = -(alpha[tlen - 1, ulen] + lp[tlen - 1, ulen, blank])
    return alpha_arr, loss


def forward_backward(double[:, :, ::1] lp, long[::1] labels, int blank,
                     bint want_grad=True):
    """Loss and (optionally) its gradient w.r.t. every lattice entry."""
    cdef Py_ssize_t tlen = lp.shape[0]
    cdef Py_ssize_t ulen = lp.shape[1] - 1
    cdef Py_ssize_t t, u
    cdef long lab
    cdef double via_blank, via_label, a, total

    alpha_arr = np.full((tlen, ulen + 1), -np.inf, dtype=np.float64)
    cdef double[:, ::1] alpha = alpha_arr
    _fill_alpha(lp, labels, blank, alpha)
    cdef double loss = -(alpha[tlen - 1, ulen] + lp[tlen - 1, ulen, blank])
    if not want_grad:
        return loss, None

    grad_arr = np.zeros((tlen, ulen + 1, lp.shape[2]), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    total = -loss
    if not isfinite(total):
        return loss, grad_arr

    beta_arr = np.full((tlen, ulen + 1), -np.inf, dtype=np.float64)
    cdef double[:, ::1] beta = beta_arr
    with nogil:
        beta[tlen - 1, ulen] = lp[tlen - 1, ulen, blank]
        for t in range(tlen - 1, -1, -1):
            for u in range(ulen, -1, -1):
                if t == tlen - 1 and u == ulen:
                    continue
                via_blank = lp[t, u, blank] + beta[t + 1, u] if t + 1 < tlen else -INFINITY
                via_label = lp[t, u, labels[u]] + beta[t, u + 1] if u < ulen else -INFINITY
                beta[t, u] = _lae(via_blank, via_label)
        for t in range(tlen):
            for u in range(ulen + 1):
                a = alpha[t, u]
                if a == -INFINITY:
                    continue
                if t + 1 < tlen:
                    grad[t, u, blank] -= exp(a + lp[t, u, blank] + beta[t + 1, u] - total)
                elif u == ulen:
                    grad[t, u, blank] -= exp(a + lp[t, u, blank] - total)
                if u < ulen:
                    lab = labels[u]
                    grad[t, u, lab] -= exp(a + lp[t, u, lab] + beta[t, u + 1] - total)
    return loss, grad_arr
