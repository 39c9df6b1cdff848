"""Covariance/precision algebra and partial-correlation networks.

An undirected network over ``m`` variables is parameterized by the partial
correlations ``r_ij = -k_ij / sqrt(k_ii * k_jj)`` computed from a precision
matrix ``K`` (the inverse covariance). A zero entry of ``K`` means the two
variables are conditionally independent given all others, so the network
edge set is exactly the nonzero pattern of ``K``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InsufficientData, InvalidPrecision, SingularCovariance

SYM_TOL_COV = 1e-12
SYM_TOL_PREC = 1e-10
PSD_TOL = 1e-10
DEFAULT_CONDITION_CAP = 1e12


def _as_square(values, name):
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _default_labels(m):
    return tuple(f"V{i + 1}" for i in range(m))


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric positive semi-definite covariance matrix.

    ``n`` is the number of observations it was computed from (0 for
    model-implied matrices).
    """

    values: np.ndarray
    n: int = 0

    def __post_init__(self):
        a = _as_square(self.values, "covariance")
        if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL_COV:
            raise ValueError("covariance matrix is not symmetric within 1e-12")
        a = (a + a.T) / 2.0
        if np.min(np.linalg.eigvalsh(a)) < -PSD_TOL:
            raise ValueError("covariance matrix is not positive semi-definite")
        object.__setattr__(self, "values", _freeze(a))

    @property
    def m(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PrecisionMatrix:
    """Symmetric precision (inverse covariance) matrix.

    ``asymmetry`` is a diagnostic set by producers that symmetrize an
    inherently asymmetric estimate (nodewise regressions): the max absolute
    difference between the raw matrix and its transpose before averaging.
    """

    values: np.ndarray
    asymmetry: float | None = None

    def __post_init__(self):
        a = _as_square(self.values, "precision")
        if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL_PREC:
            raise ValueError("precision matrix is not symmetric within 1e-10")
        object.__setattr__(self, "values", _freeze((a + a.T) / 2.0))

    @property
    def m(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class GgmNetwork:
    """Partial-correlation network: weights plus inclusion mask."""

    partials: np.ndarray
    included: np.ndarray
    labels: tuple = field(default=None)

    def __post_init__(self):
        p = _as_square(self.partials, "partials")
        inc = np.asarray(self.included, dtype=bool)
        m = p.shape[0]
        if inc.shape != (m, m):
            raise ValueError("included mask shape does not match partials")
        labels = self.labels if self.labels is not None else _default_labels(m)
        labels = tuple(str(x) for x in labels)
        if len(labels) != m:
            raise ValueError("need one label per variable")
        if np.max(np.abs(p - p.T), initial=0.0) > 1e-10 or np.any(inc != inc.T):
            raise ValueError("network matrices must be symmetric")
        if np.max(np.abs(np.diag(p) - 1.0), initial=0.0) > 1e-10:
            raise ValueError("partials must have a unit diagonal")
        if np.max(np.abs(p), initial=0.0) > 1.0 + 1e-10:
            raise ValueError("partial correlations must lie in [-1, 1]")
        if np.any(np.diag(inc)):
            raise ValueError("included mask must be False on the diagonal")
        if np.any((p != 0.0) & ~inc & ~np.eye(m, dtype=bool)):
            raise ValueError("excluded edges must have zero partials")
        object.__setattr__(self, "partials", _freeze(np.clip((p + p.T) / 2.0, -1.0, 1.0)))
        inc = inc.copy()
        inc.flags.writeable = False
        object.__setattr__(self, "included", inc)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self):
        return self.partials.shape[0]

    @property
    def edge_count(self):
        return int(np.count_nonzero(np.triu(self.included, k=1)))


@dataclass(frozen=True)
class NodewiseRegression:
    """Per-variable multiple regressions on all remaining variables.

    ``gamma[i, j]`` is the coefficient of predictor j in the regression of
    variable i; the diagonal is structurally zero.
    """

    gamma: np.ndarray
    intercepts: np.ndarray
    residual_variances: np.ndarray

    def __post_init__(self):
        g = _as_square(self.gamma, "gamma")
        ic = np.asarray(self.intercepts, dtype=np.float64)
        rv = np.asarray(self.residual_variances, dtype=np.float64)
        m = g.shape[0]
        if np.any(np.diag(g) != 0.0):
            raise ValueError("gamma must have an exactly zero diagonal")
        if ic.shape != (m,) or rv.shape != (m,):
            raise ValueError("intercepts/residual_variances must be length-m vectors")
        if np.any(rv <= 0.0):
            raise ValueError("residual variances must be positive")
        object.__setattr__(self, "gamma", _freeze(g))
        object.__setattr__(self, "intercepts", _freeze(ic))
        object.__setattr__(self, "residual_variances", _freeze(rv))

    @property
    def m(self):
        return self.gamma.shape[0]


def sample_covariance(data, denominator="n-1"):
    """Column-centered covariance of an (n, m) observation matrix.

    ``denominator`` chooses between the unbiased ``n-1`` and the maximum
    likelihood ``n`` convention.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be a 2-d observation matrix")
    n = x.shape[0]
    if n < 2:
        raise InsufficientData("need at least 2 observations for a covariance")
    if np.any(~np.isfinite(x)):
        raise ValueError("data contains missing/non-finite cells; apply a missingness policy first")
    if denominator not in ("n-1", "n"):
        raise ValueError("denominator must be 'n-1' or 'n'")
    xc = x - x.mean(axis=0)
    div = n - 1 if denominator == "n-1" else n
    s = xc.T @ xc / div
    return CovMatrix((s + s.T) / 2.0, n=n)


def _gauss_newton_refine(k, sigma, max_steps=3, tol=1e-8):
    # Newton iteration K <- K (2I - Sigma K) squares the inversion residual;
    # a couple of steps recover per-entry accuracy lost to ill-conditioning.
    m = sigma.shape[0]
    eye = np.eye(m)
    for _ in range(max_steps):
        resid = np.max(np.abs(k @ sigma - eye))
        if resid < tol:
            break
        k = k @ (2.0 * eye - sigma @ k)
        k = (k + k.T) / 2.0
    return k


def precision_from_covariance(sigma, condition_cap=DEFAULT_CONDITION_CAP):
    """Invert a covariance matrix into a precision matrix.

    Refuses inputs whose 2-norm condition number exceeds ``condition_cap``
    (default 1e12): near-singular sample covariances should go through the
    penalized estimator instead of plain inversion.
    """
    if not isinstance(sigma, CovMatrix):
        sigma = CovMatrix(sigma)
    s = sigma.values
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > condition_cap:
        raise SingularCovariance(
            f"covariance condition number {cond:.3g} exceeds cap {condition_cap:.3g}"
        )
    k = np.linalg.inv(s)
    k = _gauss_newton_refine((k + k.T) / 2.0, s)
    if np.max(np.abs(k @ s - np.eye(sigma.m))) > 1e-8:
        raise SingularCovariance("inverse did not reach the 1e-8 accuracy contract")
    return PrecisionMatrix(k)


def partial_correlations(k, labels=None):
    """Standardize a precision matrix into a partial-correlation network.

    The inclusion mask is the exact nonzero pattern of the off-diagonal
    partials, so sparse precision estimates carry their structure through.
    """
    if isinstance(k, PrecisionMatrix):
        kv = k.values
    else:
        kv = PrecisionMatrix(k).values
    d = np.diag(kv)
    if np.any(d <= 0.0):
        raise InvalidPrecision("precision diagonal must be strictly positive")
    scale = 1.0 / np.sqrt(d)
    r = -kv * np.outer(scale, scale)
    np.fill_diagonal(r, 1.0)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    included = r != 0.0
    np.fill_diagonal(included, False)
    return GgmNetwork(r, included, labels)


def regression_to_precision(reg):
    """Assemble a precision matrix from nodewise regressions.

    ``K = D (I - Gamma)`` with ``d_ii`` the reciprocal residual variance.
    The raw product is not exactly symmetric when the regressions come from
    finite or inconsistent data; the result is symmetrized by averaging and
    the pre-averaging asymmetry is reported on the returned matrix.
    """
    if not isinstance(reg, NodewiseRegression):
        raise TypeError("expected a NodewiseRegression")
    d = 1.0 / reg.residual_variances
    k_raw = d[:, None] * (np.eye(reg.m) - reg.gamma)
    asym = float(np.max(np.abs(k_raw - k_raw.T), initial=0.0))
    return PrecisionMatrix((k_raw + k_raw.T) / 2.0, asymmetry=asym)


def partial_correlation_pvalues(network, n, df=None):
    """Two-sided Fisher-z p-values for every off-diagonal partial.

    The default effective degrees of freedom are ``n - m - 1`` (n cases, m
    variables, so m - 2 conditioning variables per edge); pass ``df`` to
    override.
    """
    m = network.m
    if df is None:
        df = n - m - 1
    if df < 1:
        raise InsufficientData(f"need n > m + 1 for significance tests (df={df})")
    r = np.clip(network.partials, -1.0, 1.0)
    with np.errstate(divide="ignore"):
        z = np.arctanh(np.clip(np.abs(r), 0.0, 1.0 - 1e-16)) * np.sqrt(df)
    p = 2.0 * stats.norm.sf(z)
    np.fill_diagonal(p, 0.0)
    return p


def threshold_significance(network, n, alpha=0.05, df=None):
    """Remove edges whose partial correlation is not significant at alpha.

    Fisher-z test with standard error ``1/sqrt(n - m - 1)``; removed edges
    are zeroed in the partials and dropped from the mask.
    """
    p = partial_correlation_pvalues(network, n, df=df)
    keep = (p < alpha) & network.included
    partials = np.where(keep, network.partials, 0.0)
    np.fill_diagonal(partials, 1.0)
    return GgmNetwork(partials, keep, network.labels)
