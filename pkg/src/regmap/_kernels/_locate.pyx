# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled point-location and P1 interpolation kernels."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _bary(double px, double py, const double[:, :] origin,
                       const double[:, :, :] binv, Py_ssize_t e,
                       double* l0, double* l1, double* l2) noexcept nogil:
    cdef double dx = px - origin[e, 0]
    cdef double dy = py - origin[e, 1]
    l1[0] = binv[e, 0, 0] * dx + binv[e, 0, 1] * dy
    l2[0] = binv[e, 1, 0] * dx + binv[e, 1, 1] * dy
    l0[0] = 1.0 - l1[0] - l2[0]


def locate_candidates(const double[:, :] points, const double[:, :] origin,
                      const double[:, :, :] binv, const cnp.int64_t[:, :] cand,
                      double tol):
    """Locate points among candidate triangles, with an exhaustive fallback.

    Returns element indices, barycentric coordinates and a found flag.  For
    points contained in no triangle the element maximising the smallest
    barycentric coordinate among the candidates is returned with flag 0.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = cand.shape[1]
    cdef Py_ssize_t ne = origin.shape[0]
    elem_arr = np.full(n, -1, dtype=np.int64)
    lam_arr = np.zeros((n, 3), dtype=np.float64)
    found_arr = np.zeros(n, dtype=np.int8)
    cdef cnp.int64_t[:] elem = elem_arr
    cdef double[:, :] lam = lam_arr
    cdef cnp.int8_t[:] found = found_arr
    cdef Py_ssize_t p, c, e, best
    cdef double l0, l1, l2, m, best_m, px, py
    cdef double b0 = 0.0, b1 = 0.0, b2 = 0.0
    with nogil:
        for p in range(n):
            px = points[p, 0]
            py = points[p, 1]
            best = -1
            best_m = -1e300
            for c in range(k):
                e = cand[p, c]
                if e < 0:
                    continue
                _bary(px, py, origin, binv, e, &l0, &l1, &l2)
                m = l0
                if l1 < m:
                    m = l1
                if l2 < m:
                    m = l2
                if m >= -tol:
                    if found[p] == 0 or e < elem[p]:
                        found[p] = 1
                        elem[p] = e
                        lam[p, 0] = l0
                        lam[p, 1] = l1
                        lam[p, 2] = l2
                elif found[p] == 0 and m > best_m:
                    best_m = m
                    best = e
                    b0 = l0
                    b1 = l1
                    b2 = l2
            if found[p] == 0:
                for e in range(ne):
                    _bary(px, py, origin, binv, e, &l0, &l1, &l2)
                    m = l0
                    if l1 < m:
                        m = l1
                    if l2 < m:
                        m = l2
                    if m >= -tol:
                        found[p] = 1
                        elem[p] = e
                        lam[p, 0] = l0
                        lam[p, 1] = l1
                        lam[p, 2] = l2
                        break
            if found[p] == 0:
                elem[p] = best
                lam[p, 0] = b0
                lam[p, 1] = b1
                lam[p, 2] = b2
    return elem_arr, lam_arr, found_arr.astype(bool)


def p1_interpolate(const cnp.int64_t[:] elem, const double[:, :] lam,
                   const cnp.int64_t[:, :] triangles, const double[:] values,
                   const double[:, :] grads):
    """Evaluate a P1 field and its (elementwise constant) gradient."""
    cdef Py_ssize_t n = elem.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    g_arr = np.empty((n, 2), dtype=np.float64)
    cdef double[:] out = out_arr
    cdef double[:, :] g = g_arr
    cdef Py_ssize_t p, e
    with nogil:
        for p in range(n):
            e = elem[p]
            out[p] = (lam[p, 0] * values[triangles[e, 0]]
                      + lam[p, 1] * values[triangles[e, 1]]
                      + lam[p, 2] * values[triangles[e, 2]])
            g[p, 0] = grads[e, 0]
            g[p, 1] = grads[e, 1]
    return out_arr, g_arr
