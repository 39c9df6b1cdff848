# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled coordinate-descent kernels.

Mirrors ``_py`` exactly (same update order, same tolerances) so both
backends produce bit-comparable iterates.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _soft(double x, double t) nogil:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_cd(double[:, ::1] V, double[::1] s, double rho, beta,
             int max_sweeps=1000, double tol=1e-9):
    cdef int p = V.shape[0]
    b_arr = np.array(beta, dtype=np.float64, copy=True)
    g_arr = np.asarray(V) @ b_arr
    cdef double[::1] b = b_arr
    cdef double[::1] g = g_arr
    cdef int sweep, j, i
    cdef double vjj, r, bj, d, ad, delta_max
    cdef bint converged = False
    with nogil:
        for sweep in range(max_sweeps):
            delta_max = 0.0
            for j in range(p):
                vjj = V[j, j]
                if vjj <= 0.0:
                    continue
                r = s[j] - (g[j] - vjj * b[j])
                bj = _soft(r, rho) / vjj
                d = bj - b[j]
                if d != 0.0:
                    for i in range(p):
                        g[i] += d * V[i, j]
                    b[j] = bj
                    ad = d if d > 0.0 else -d
                    if ad > delta_max:
                        delta_max = ad
            if delta_max < tol:
                converged = True
                break
    return b_arr, bool(converged)


def mrce_cd(double[:, ::1] S, double[:, ::1] H, double[:, ::1] K, C,
            double lam, int max_sweeps=200, double tol=1e-9):
    cdef int p = H.shape[0]
    cdef int q = H.shape[1]
    C_arr = np.array(C, dtype=np.float64, copy=True)
    HK_arr = np.asarray(H) @ np.asarray(K)
    G_arr = np.asarray(S) @ C_arr @ np.asarray(K)
    cdef double[:, ::1] Cv = C_arr
    cdef double[:, ::1] HK = HK_arr
    cdef double[:, ::1] G = G_arr
    cdef int sweep, j, k, a, bcol
    cdef double denom, target, cjk, d, ad, delta_max
    cdef bint converged = False
    with nogil:
        for sweep in range(max_sweeps):
            delta_max = 0.0
            for j in range(p):
                for k in range(q):
                    denom = S[j, j] * K[k, k]
                    if denom <= 0.0:
                        continue
                    target = Cv[j, k] + (HK[j, k] - G[j, k]) / denom
                    cjk = _soft(target, lam / (2.0 * denom))
                    d = cjk - Cv[j, k]
                    if d != 0.0:
                        for a in range(p):
                            for bcol in range(q):
                                G[a, bcol] += d * S[a, j] * K[k, bcol]
                        Cv[j, k] = cjk
                        ad = d if d > 0.0 else -d
                        if ad > delta_max:
                            delta_max = ad
            if delta_max < tol:
                converged = True
                break
    return C_arr, bool(converged)
