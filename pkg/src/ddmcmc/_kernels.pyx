# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled assembly kernels for the bilinear diffusion operator.

Both routines work on LAPACK upper band storage, ``ab[u + i - j, j] = A[i, j]``
for ``i <= j``, which is what ``scipy.linalg.solveh_banded`` consumes.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def assemble_band(const double[:, ::1] kq, const double[:, :, ::1] G,
                  const cnp.int64_t[:, ::1] conn, Py_ssize_t n, Py_ssize_t u):
    """Accumulate element stiffness matrices into band storage.

    kq[e, q] is the permeability at Gauss point q of element e and
    G[q, a, b] the weighted gradient products of the reference element.
    """
    cdef Py_ssize_t ne = kq.shape[0]
    cdef Py_ssize_t e, q, a, b, gi, gj
    cdef double ke[4][4]
    cdef double s
    ab_arr = np.zeros((u + 1, n), dtype=np.float64)
    cdef double[:, ::1] ab = ab_arr
    for e in range(ne):
        for a in range(4):
            for b in range(a, 4):
                s = 0.0
                for q in range(4):
                    s += kq[e, q] * G[q, a, b]
                ke[a][b] = s
        for a in range(4):
            gi = conn[e, a]
            for b in range(4):
                gj = conn[e, b]
                if gi > gj:
                    continue
                if a <= b:
                    ab[u + gi - gj, gj] += ke[a][b]
                else:
                    ab[u + gi - gj, gj] += ke[b][a]
    return ab_arr


def apply_dirichlet(double[:, ::1] ab, double[::1] rhs,
                    const cnp.int64_t[::1] nodes, const double[::1] values):
    """Eliminate Dirichlet rows/columns in place, lifting known values to rhs."""
    cdef Py_ssize_t u = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef Py_ssize_t k, i, j, lo, hi
    cdef double g, a
    for k in range(nodes.shape[0]):
        j = nodes[k]
        g = values[k]
        lo = j - u if j > u else 0
        for i in range(lo, j):
            a = ab[u + i - j, j]
            if a != 0.0:
                rhs[i] -= a * g
                ab[u + i - j, j] = 0.0
        hi = j + u + 1 if j + u + 1 < n else n
        for i in range(j + 1, hi):
            a = ab[u + j - i, i]
            if a != 0.0:
                rhs[i] -= a * g
                ab[u + j - i, i] = 0.0
        ab[u, j] = 1.0
        rhs[j] = g


def band_matvec(const double[:, ::1] ab, const double[::1] x):
    """y = A x for symmetric A in upper band storage."""
    cdef Py_ssize_t u = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef Py_ssize_t i, j, lo
    cdef double a
    y_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] y = y_arr
    for j in range(n):
        y[j] += ab[u, j] * x[j]
        lo = j - u if j > u else 0
        for i in range(lo, j):
            a = ab[u + i - j, j]
            y[i] += a * x[j]
            y[j] += a * x[i]
    return y_arr
