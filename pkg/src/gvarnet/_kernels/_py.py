"""Pure NumPy/Python reference kernels.

Same contracts as the compiled module ``_cy``; used as the import-time
fallback and as the comparison baseline in benchmarks. Coordinate descent
is inherently sequential, so these loops are slow in Python -- correctness
first, the compiled twin provides the speed.
"""

import numpy as np


def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_cd(V, s, rho, beta, max_sweeps=1000, tol=1e-9):
    """Cyclic coordinate descent for ``min_b 0.5 b'Vb - s'b + rho*||b||_1``.

    V : (p, p) symmetric positive definite, C-contiguous float64
    s : (p,) linear term
    beta : (p,) starting point (not modified)
    Returns (beta_hat, converged).
    """
    p = V.shape[0]
    b = np.array(beta, dtype=np.float64, copy=True)
    g = V @ b  # gradient of the smooth part is g - s
    converged = False
    for _ in range(max_sweeps):
        delta_max = 0.0
        for j in range(p):
            vjj = V[j, j]
            if vjj <= 0.0:
                continue
            # partial residual excludes coordinate j
            r = s[j] - (g[j] - vjj * b[j])
            bj = _soft(r, rho) / vjj
            d = bj - b[j]
            if d != 0.0:
                g += d * V[:, j]
                b[j] = bj
                ad = abs(d)
                if ad > delta_max:
                    delta_max = ad
        if delta_max < tol:
            converged = True
            break
    return b, converged


def mrce_cd(S, H, K, C, lam, max_sweeps=200, tol=1e-9):
    """Coordinate descent sweeps for the L1-penalized multivariate
    regression step ``min_C tr((Y-XC)'(Y-XC) K)/n + lam*||C||_1``.

    S : (p, p) = X'X/n
    H : (p, q) = X'Y/n
    K : (q, q) error precision, held fixed
    C : (p, q) starting coefficients (not modified)
    Returns (C_hat, converged).
    """
    p, q = H.shape
    C = np.array(C, dtype=np.float64, copy=True)
    HK = H @ K
    G = S @ C @ K
    converged = False
    for _ in range(max_sweeps):
        delta_max = 0.0
        for j in range(p):
            for k in range(q):
                denom = S[j, j] * K[k, k]
                if denom <= 0.0:
                    continue
                target = C[j, k] + (HK[j, k] - G[j, k]) / denom
                cjk = _soft(target, lam / (2.0 * denom))
                d = cjk - C[j, k]
                if d != 0.0:
                    G += d * np.outer(S[:, j], K[k, :])
                    C[j, k] = cjk
                    ad = abs(d)
                    if ad > delta_max:
                        delta_max = ad
        if delta_max < tol:
            converged = True
            break
    return C, converged
