# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: CTC lattices, CTC prefix extension, edit distance.

Mirrors :mod:`multist._kernels_py` function for function.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double lse(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef void _alpha(const double[:, ::1] logp, const long[::1] ext, double[:, ::1] alpha, long blank) nogil:
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    cdef double acc
    for t in range(T):
        for s in range(S):
            alpha[t, s] = -INFINITY
    alpha[0, 0] = logp[0, blank]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = lse(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                acc = lse(acc, alpha[t - 1, s - 2])
            if acc != -INFINITY:
                alpha[t, s] = acc + logp[t, ext[s]]


cdef void _beta(const double[:, ::1] logp, const long[::1] ext, double[:, ::1] beta, long blank) nogil:
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    cdef double acc
    for t in range(T):
        for s in range(S):
            beta[t, s] = -INFINITY
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                acc = lse(acc, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                acc = lse(acc, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = acc


def _ext(target, long blank):
    cdef cnp.ndarray[long, ndim=1] ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_alpha(logp, target, long blank):
    cdef double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef long[::1] ext = _ext(np.asarray(target, dtype=np.int64), blank)
    alpha = np.empty((lp.shape[0], ext.shape[0]))
    _alpha(lp, ext, alpha, blank)
    return alpha


def ctc_beta(logp, target, long blank):
    cdef double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef long[::1] ext = _ext(np.asarray(target, dtype=np.int64), blank)
    beta = np.empty((lp.shape[0], ext.shape[0]))
    _beta(lp, ext, beta, blank)
    return beta


def ctc_loss_grad(logp, target, long blank):
    cdef double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef long[::1] ext = _ext(np.asarray(target, dtype=np.int64), blank)
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t V = lp.shape[1]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    cdef double tail
    alpha_arr = np.empty((T, S))
    beta_arr = np.empty((T, S))
    grad_arr = np.zeros((T, V))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] grad = grad_arr
    _alpha(lp, ext, alpha, blank)
    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = lse(tail, alpha[T - 1, S - 2])
    if tail == -INFINITY:
        return np.inf, grad_arr
    _beta(lp, ext, beta, blank)
    with nogil:
        for t in range(T):
            for s in range(S):
                if alpha[t, s] != -INFINITY and beta[t, s] != -INFINITY:
                    grad[t, ext[s]] -= exp(alpha[t, s] + beta[t, s] - tail)
    return -tail, grad_arr


def ctc_prefix_extend(logp, r_prev, long last, cands, long blank, bint empty_prefix):
    cdef double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef double[:, ::1] rp = np.ascontiguousarray(r_prev, dtype=np.float64)
    cdef long[::1] cs = np.ascontiguousarray(cands, dtype=np.int64)
    cdef Py_ssize_t T = lp.shape[0]
    cdef Py_ssize_t K = cs.shape[0]
    cdef Py_ssize_t k, t
    cdef long c
    cdef double phi, psi, rn, rb
    r_arr = np.empty((K, T, 2))
    psi_arr = np.empty(K)
    cdef double[:, :, ::1] r = r_arr
    cdef double[::1] psis = psi_arr
    with nogil:
        for k in range(K):
            c = cs[k]
            rn = lp[0, c] if empty_prefix else -INFINITY
            rb = -INFINITY
            r[k, 0, 0] = rn
            r[k, 0, 1] = rb
            psi = rn
            for t in range(1, T):
                if not empty_prefix and c == last:
                    phi = rp[t - 1, 1]
                else:
                    phi = lse(rp[t - 1, 0], rp[t - 1, 1])
                psi = lse(psi, phi + lp[t, c])
                rb = lse(rn, rb) + lp[t, blank]
                rn = lse(rn, phi) + lp[t, c]
                r[k, t, 0] = rn
                r[k, t, 1] = rb
            psis[k] = psi
    return r_arr, psi_arr


def edit_distance(a, b):
    cdef long[::1] x = np.ascontiguousarray(a, dtype=np.int64)
    cdef long[::1] y = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = y.shape[0]
    cdef Py_ssize_t i, j
    cdef long v
    prev_arr = np.arange(m + 1, dtype=np.int64)
    cur_arr = np.empty(m + 1, dtype=np.int64)
    cdef long[::1] prev = prev_arr
    cdef long[::1] cur = cur_arr
    cdef long[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            v = prev[j - 1] + (0 if x[i - 1] == y[j - 1] else 1)
            if prev[j] + 1 < v:
                v = prev[j] + 1
            if cur[j - 1] + 1 < v:
                v = cur[j - 1] + 1
            cur[j] = v
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
