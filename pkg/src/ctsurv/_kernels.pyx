# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood kernels; see ``_kernels_py`` for the reference version."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def accumulate_pieces(const double[:, ::1] elh, const double[:, ::1] eeta,
                      const long[::1] site, const long[::1] k, const long[::1] seg,
                      const double[::1] length, const double[:, ::1] pi,
                      const long[::1] acc, Py_ssize_t n_acc):
    cdef Py_ssize_t n = length.shape[0], V = pi.shape[1], p, v
    c_arr = np.empty((n, V))
    H_arr = np.zeros(n_acc)
    cdef double[:, ::1] c = c_arr
    cdef double[::1] H = H_arr
    cdef double base, val, tot
    for p in range(n):
        base = length[p] * elh[site[p], k[p]]
        tot = 0.0
        for v in range(V):
            val = base * pi[p, v] * eeta[seg[p], v]
            c[p, v] = val
            tot += val
        H[acc[p]] += tot
    return c_arr, H_arr


def point_hazards(const double[:, ::1] elh, const double[:, ::1] eeta,
                  const long[::1] site, const long[::1] k, const long[::1] seg,
                  const double[:, ::1] pi):
    cdef Py_ssize_t n = pi.shape[0], V = pi.shape[1], q, v
    hv_arr = np.empty((n, V))
    cdef double[:, ::1] hv = hv_arr
    cdef double base
    for q in range(n):
        base = elh[site[q], k[q]]
        for v in range(V):
            hv[q, v] = base * pi[q, v] * eeta[seg[q], v]
    return hv_arr


def backprop_pieces(const double[:, ::1] c, const long[::1] acc, const double[::1] gH,
                    const long[::1] site, const long[::1] k, const long[::1] seg,
                    double[:, ::1] g_lh, double[:, ::1] g_eta):
    cdef Py_ssize_t n = c.shape[0], V = c.shape[1], p, v
    cdef double w, tot
    for p in range(n):
        w = gH[acc[p]]
        if w == 0.0:
            continue
        tot = 0.0
        for v in range(V):
            g_eta[seg[p], v] += w * c[p, v]
            tot += c[p, v]
        g_lh[site[p], k[p]] += w * tot


def backprop_points(const double[:, ::1] w, const long[::1] site, const long[::1] k,
                    const long[::1] seg, double[:, ::1] g_lh, double[:, ::1] g_eta):
    cdef Py_ssize_t n = w.shape[0], V = w.shape[1], q, v
    cdef double tot
    for q in range(n):
        tot = 0.0
        for v in range(V):
            g_eta[seg[q], v] += w[q, v]
            tot += w[q, v]
        g_lh[site[q], k[q]] += tot
