# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: cyclic complex Jacobi and Fano evaluation.

Mirrors ``wgmesr._pykernels`` exactly; see that module for the algorithm.
"""
import numpy as np

from libc.math cimport sqrt, fabs


cdef inline double cabs2(double complex z) nogil:
    return z.real * z.real + z.imag * z.imag


def jacobi_eigh(a_in, double tol=1e-13, int max_sweeps=100):
    cdef double complex[:, ::1] a = np.array(a_in, dtype=np.complex128, order="C", copy=True)
    cdef Py_ssize_t n = a.shape[0]
    v_arr = np.eye(n, dtype=np.complex128)
    cdef double complex[:, ::1] v = v_arr
    cdef Py_ssize_t p, q, k
    cdef int sweep = 0
    cdef double norm2 = 0.0, off2, r, theta, t, c, s
    cdef double complex apq, ph, jpp, jpq, jqp, jqq, x, y
    cdef bint converged = False

    for p in range(n):
        for q in range(n):
            norm2 += cabs2(a[p, q])
    cdef double thresh2 = tol * tol * norm2

    with nogil:
        while sweep < max_sweeps:
            off2 = 0.0
            for p in range(n):
                for q in range(p + 1, n):
                    off2 += 2.0 * cabs2(a[p, q])
            if off2 <= thresh2:
                converged = True
                break
            sweep += 1
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    r = sqrt(cabs2(apq))
                    if r == 0.0:
                        continue
                    ph = apq / r
                    theta = (a[q, q].real - a[p, p].real) / (2.0 * r)
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    # J = diag-phase(q) . real rotation(p, q)
                    jpp = c
                    jpq = s
                    jqp = -s * ph.conjugate()
                    jqq = c * ph.conjugate()
                    for k in range(n):
                        x = a[k, p]
                        y = a[k, q]
                        a[k, p] = x * jpp + y * jqp
                        a[k, q] = x * jpq + y * jqq
                    for k in range(n):
                        x = a[p, k]
                        y = a[q, k]
                        a[p, k] = jpp.conjugate() * x + jqp.conjugate() * y
                        a[q, k] = jpq.conjugate() * x + jqq.conjugate() * y
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    a[p, p] = a[p, p].real
                    a[q, q] = a[q, q].real
                    for k in range(n):
                        x = v[k, p]
                        y = v[k, q]
                        v[k, p] = x * jpp + y * jqp
                        v[k, q] = x * jpq + y * jqq

    w = np.array([a[k, k].real for k in range(n)], dtype=np.float64)
    return w, v_arr, sweep, converged


def fano_eval(f_in, double f0, double gamma, double q, double amp, double offset):
    cdef double[::1] f = np.ascontiguousarray(f_in, dtype=np.float64).ravel()
    cdef Py_ssize_t n = f.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double hw = 0.5 * gamma, d, num
    with nogil:
        for i in range(n):
            d = f[i] - f0
            num = q * hw + d
            out[i] = amp * (1.0 - num * num / (hw * hw + d * d)) + offset
    return out_arr
