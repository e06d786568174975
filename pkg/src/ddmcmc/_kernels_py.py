"""Numpy implementations of the assembly kernels (fallback for ``_kernels``)."""
import numpy as np


def _upper_pairs():
    return [(a, b) for a in range(4) for b in range(4)]


def assemble_band(kq, G, conn, n, u):
    kq = np.asarray(kq, dtype=np.float64)
    # ke[e, a, b] for all 16 (a, b); keep entries with gi <= gj so each
    # symmetric pair lands exactly once.
    ke = np.einsum("eq,qab->eab", kq, G).reshape(len(kq), 16)
    gi = np.repeat(conn, 4, axis=1)
    gj = np.tile(conn, (1, 4))
    keep = gi <= gj
    flat = (u + gi[keep] - gj[keep]) * n + gj[keep]
    ab = np.bincount(flat, weights=ke[keep], minlength=(u + 1) * n)
    return ab.reshape(u + 1, n)


def apply_dirichlet(ab, rhs, nodes, values):
    u = ab.shape[0] - 1
    n = ab.shape[1]
    g = np.zeros(n)
    g[nodes] = values
    mask = np.zeros(n, dtype=bool)
    mask[nodes] = True
    rhs -= band_matvec(ab, g)
    for k in range(1, u + 1):
        row = ab[u - k]
        # row[j] = A[j - k, j]
        hit = mask[k:] | mask[: n - k]
        row[k:][hit] = 0.0
    ab[u, mask] = 1.0
    rhs[mask] = values


def band_matvec(ab, x):
    u = ab.shape[0] - 1
    n = ab.shape[1]
    y = ab[u] * x
    for k in range(1, u + 1):
        a = ab[u - k, k:]
        y[: n - k] += a * x[k:]
        y[k:] += a * x[: n - k]
    return y
