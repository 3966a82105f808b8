# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ADMM iteration loop for small dense QPs."""
import numpy as np
from libc.math cimport fabs, fmax, fmin, INFINITY


cdef inline void _chol_solve(const double[:, ::1] L, double[::1] b, Py_ssize_t n) nogil:
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * b[k]
        b[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * b[k]
        b[i] = acc / L[i, i]


def admm_run(const double[:, ::1] L, const double[:, ::1] P, const double[::1] q,
             const double[:, ::1] A, const double[::1] l, const double[::1] u,
             const double[::1] rho, double sigma, double alpha,
             double[::1] x, double[::1] s, double[::1] y, double[::1] dy,
             Py_ssize_t max_iter, Py_ssize_t check_every, double eps_prim, double eps_dual):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = s.shape[0]
    cdef Py_ssize_t i, j, it
    cdef double acc, zt, zh, sn, prim = INFINITY, dual = INFINITY
    cdef double[::1] xt = np.empty(max(n, 1))
    cdef bint converged = False
    with nogil:
        for it in range(1, max_iter + 1):
            # rhs = sigma x - q + A^T (rho s - y)
            for j in range(n):
                xt[j] = sigma * x[j] - q[j]
            for i in range(m):
                acc = rho[i] * s[i] - y[i]
                for j in range(n):
                    xt[j] += A[i, j] * acc
            _chol_solve(L, xt, n)
            for i in range(m):
                zt = 0.0
                for j in range(n):
                    zt += A[i, j] * xt[j]
                zh = alpha * zt + (1.0 - alpha) * s[i]
                sn = fmin(fmax(zh + y[i] / rho[i], l[i]), u[i])
                dy[i] = rho[i] * (zh - sn)
                y[i] += dy[i]
                s[i] = sn
            for j in range(n):
                x[j] = alpha * xt[j] + (1.0 - alpha) * x[j]
            if it % check_every == 0 or it == max_iter:
                prim = 0.0
                for i in range(m):
                    acc = -s[i]
                    for j in range(n):
                        acc += A[i, j] * x[j]
                    prim = fmax(prim, fabs(acc))
                dual = 0.0
                for j in range(n):
                    acc = q[j]
                    for i in range(n):
                        acc += P[j, i] * x[i]
                    for i in range(m):
                        acc += A[i, j] * y[i]
                    dual = fmax(dual, fabs(acc))
                if prim <= eps_prim and dual <= eps_dual:
                    converged = True
                    break
    if not converged:
        it = max_iter
    return it, converged, prim, dual
