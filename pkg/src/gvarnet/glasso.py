"""L1-penalized precision estimation and EBIC model selection.

``glasso`` maximizes ``log det K - tr(SK) - rho * ||K||_1,offdiag`` by
blockwise coordinate descent on the working covariance (one lasso problem
per column), the standard fast algorithm for this estimator. Iterations
continue until the exact stationarity certificate holds entry-wise:

    w_ii = s_ii
    w_ij - s_ij = rho * sign(k_ij)    for k_ij != 0, i != j
    |w_ij - s_ij| <= rho              for k_ij == 0, i != j

with ``W`` the inverse of the returned ``K``. The certificate is what the
caller can verify, so it is also the convergence target.
"""

import warnings

import numpy as np

from . import _kernels
from .errors import ConvergenceFailure, SingularCovariance
from .ggm import CovMatrix, PrecisionMatrix, partial_correlations, precision_from_covariance

DEFAULT_KKT_TOL = 1e-4
# converge well past the advertised certificate so independent re-checks
# (with their own inversion error) still land under it
_SAFETY = 0.2


def kkt_residual(s, k, rho):
    """Max entry-wise violation of the glasso stationarity conditions."""
    try:
        w = np.linalg.inv(k)
    except np.linalg.LinAlgError:
        return np.inf
    w = (w + w.T) / 2.0
    diff = w - s
    m = s.shape[0]
    off = ~np.eye(m, dtype=bool)
    nonzero = (k != 0.0) & off
    zero = (k == 0.0) & off
    resid = np.abs(np.diag(diff))
    if np.any(nonzero):
        resid = np.concatenate([resid, np.abs(diff[nonzero] - rho * np.sign(k[nonzero]))])
    if np.any(zero):
        resid = np.concatenate([resid, np.maximum(np.abs(diff[zero]) - rho, 0.0)])
    return float(np.max(resid))


def _assemble_precision(w, betas):
    # Recover K column-by-column from the lasso coefficients so the zero
    # pattern of K is exactly the zero pattern of the coefficients.
    m = w.shape[0]
    k = np.zeros((m, m))
    for j in range(m):
        rest = np.arange(m) != j
        denom = w[j, j] - w[rest, j] @ betas[rest, j]
        kjj = 1.0 / denom
        k[j, j] = kjj
        # each off-diagonal accumulates half from its two column problems,
        # which averages the two (nearly identical) estimates
        k[rest, j] += -betas[rest, j] * kjj / 2.0
        k[j, rest] += -betas[rest, j] * kjj / 2.0
    return k


def glasso(s, rho, max_iter=200, kkt_tol=DEFAULT_KKT_TOL, init=None):
    """L1-penalized maximum-likelihood precision matrix.

    Parameters
    ----------
    s : CovMatrix or (m, m) array, symmetric PSD
    rho : float >= 0, off-diagonal penalty
    init : optional (W, betas) pair for warm starts along a penalty path

    Returns a PrecisionMatrix whose KKT residual is below ``kkt_tol``.
    Raises ConvergenceFailure (carrying the last iterate) if ``max_iter``
    blockwise sweeps do not reach the certificate.
    """
    if not isinstance(s, CovMatrix):
        s = CovMatrix(s)
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    sv = s.values
    m = s.m
    if rho == 0.0:
        # unpenalized MLE: plain inversion, which satisfies the certificate
        # exactly (W = S) whenever S is well conditioned
        return precision_from_covariance(s)
    if m == 1:
        return PrecisionMatrix(np.array([[1.0 / sv[0, 0]]]))
    if np.any(np.diag(sv) <= 0.0):
        raise SingularCovariance("covariance has a nonpositive diagonal entry")

    if init is not None:
        w = init[0].copy()
        betas = init[1].copy()
        np.fill_diagonal(w, np.diag(sv))
    else:
        w = sv.copy()
        betas = np.zeros((m, m))

    target = kkt_tol * _SAFETY
    k = None
    idx = np.arange(m)
    for _ in range(max_iter):
        for j in range(m):
            rest = idx != j
            v = np.ascontiguousarray(w[np.ix_(rest, rest)])
            s12 = np.ascontiguousarray(sv[rest, j])
            beta, _ = _kernels.lasso_cd(v, s12, rho, betas[rest, j], max_sweeps=1000, tol=1e-10)
            betas[rest, j] = beta
            w12 = v @ beta
            w[rest, j] = w12
            w[j, rest] = w12
        k = _assemble_precision(w, betas)
        if kkt_residual(sv, k, rho) < target:
            return PrecisionMatrix(k)
    raise ConvergenceFailure(
        f"glasso did not reach KKT residual {kkt_tol:g} in {max_iter} sweeps",
        last=PrecisionMatrix((k + k.T) / 2.0),
    )


def glasso_state(result):
    """(W, betas) warm-start pair for continuing from a previous solution."""
    k = result.values
    w = np.linalg.inv(k)
    w = (w + w.T) / 2.0
    m = k.shape[0]
    betas = np.zeros((m, m))
    for j in range(m):
        rest = np.arange(m) != j
        betas[rest, j] = -k[rest, j] / k[j, j]
    return w, betas


def ebic(k, s, n, gamma):
    """Extended BIC of a Gaussian model with precision ``k`` on covariance
    ``s`` from ``n`` observations.

    ``-2*loglik + E*log(n) + 4*E*gamma*log(m)`` where ``E`` counts nonzero
    off-diagonal entries in the upper triangle and the log-likelihood is
    ``(n/2) * (log det K - tr(SK))`` up to an additive constant.
    """
    kv = k.values if isinstance(k, PrecisionMatrix) else np.asarray(k, dtype=np.float64)
    sv = s.values if isinstance(s, CovMatrix) else np.asarray(s, dtype=np.float64)
    m = kv.shape[0]
    sign, logdet = np.linalg.slogdet(kv)
    if sign <= 0:
        raise ValueError("precision matrix must be positive definite for EBIC")
    ll = 0.5 * n * (logdet - float(np.sum(sv * kv)))
    e = int(np.count_nonzero(np.triu(kv, k=1)))
    return float(-2.0 * ll + e * np.log(n) + 4.0 * e * gamma * np.log(m))


def default_rho_grid(s, n_rho=100, ratio=0.01):
    """Log-spaced penalty grid from the empty-model threshold downward.

    The largest value is the smallest rho that zeroes every off-diagonal
    (``max |s_ij|``, i != j); the grid descends to ``ratio`` times that.
    """
    sv = s.values if isinstance(s, CovMatrix) else np.asarray(s, dtype=np.float64)
    off = sv[~np.eye(sv.shape[0], dtype=bool)]
    rho_max = float(np.max(np.abs(off), initial=0.0))
    if rho_max <= 0.0:
        rho_max = 1e-4
    return np.geomspace(rho_max, rho_max * ratio, n_rho)


class GlassoPath:
    """All fits along a penalty grid, ordered by descending rho."""

    def __init__(self, rhos, precisions, ebics):
        self.rhos = rhos
        self.precisions = precisions
        self.ebics = ebics

    def edge_counts(self):
        return [int(np.count_nonzero(np.triu(k.values, k=1))) for k in self.precisions]

    def best_index(self):
        # ties break toward the sparser model, i.e. the larger rho, which
        # comes first in the descending grid
        return int(np.argmin(self.ebics))


def glasso_path(s, rho_grid, gamma, n, max_iter=200, kkt_tol=DEFAULT_KKT_TOL,
                monotone="warn"):
    """Cold-started fits over a descending penalty grid.

    Each grid point is solved from scratch: warm-starting across penalties
    makes the reported zero pattern sticky near edge-entry boundaries,
    which scrambles the edge count along the path.

    ``monotone`` handles grid points where the edge count shrinks as rho
    decreases: 'warn' (default), 'raise', or 'ignore'. Such dips are a
    genuine (if rare) property of the exact solution path -- an edge with a
    tiny weight can enter and leave again -- not only a convergence
    artifact, so a hard failure is opt-in.
    """
    order = np.argsort(np.asarray(rho_grid, dtype=np.float64))[::-1]
    rhos = np.asarray(rho_grid, dtype=np.float64)[order]
    precisions = []
    ebics = []
    failures = []
    for rho in rhos:
        try:
            fit = glasso(s, rho, max_iter=max_iter, kkt_tol=kkt_tol)
        except (ConvergenceFailure, SingularCovariance) as exc:
            failures.append((rho, exc))
            precisions.append(None)
            ebics.append(np.inf)
            continue
        precisions.append(fit)
        ebics.append(ebic(fit, s, n, gamma))
    kept = [p for p in precisions if p is not None]
    if not kept:
        raise ConvergenceFailure(
            "every glasso fit on the penalty grid failed", trace=failures
        )
    counts = [
        int(np.count_nonzero(np.triu(p.values, k=1))) for p in kept
    ]
    # rho descends, so the edge count should (almost always) only grow
    if monotone != "ignore" and any(b < a for a, b in zip(counts, counts[1:])):
        msg = "edge count dipped along the descending rho grid"
        if monotone == "raise":
            raise ConvergenceFailure(msg, trace=list(zip(rhos, counts)))
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return GlassoPath(rhos, precisions, ebics)


def ebic_glasso(data, n=None, rho_grid=None, gamma=0.25, n_rho=100, labels=None,
                denominator="n-1", max_iter=200, kkt_tol=DEFAULT_KKT_TOL,
                monotone="warn"):
    """Penalized network estimation with EBIC tuning-parameter selection.

    ``data`` is either an (n, m) observation matrix or a CovMatrix (then
    ``n`` may be given to override the stored sample size). Fits the whole
    penalty grid (default 100 log-spaced values, descending) and returns
    the partial-correlation network of the fit with the smallest EBIC;
    ties break toward the sparser model.
    """
    from .ggm import sample_covariance

    if isinstance(data, CovMatrix):
        s = data
        n = n if n is not None else s.n
    else:
        s = sample_covariance(data, denominator=denominator)
        n = s.n
    if n < 2:
        raise ValueError("EBIC needs the sample size n >= 2")
    if rho_grid is None:
        rho_grid = default_rho_grid(s, n_rho=n_rho)
    rho_grid = np.asarray(rho_grid, dtype=np.float64)
    if rho_grid.size == 0:
        raise ValueError("penalty grid must be nonempty")
    path = glasso_path(s, rho_grid, gamma, n, max_iter=max_iter, kkt_tol=kkt_tol,
                       monotone=monotone)
    best = path.precisions[path.best_index()]
    return partial_correlations(best, labels=labels)
