"""Univariate linear mixed models estimated by REML.

The model is ``y = X b + Z u_g + e`` with one random-effect vector per
group, ``u_g ~ N(0, sigma^2 * Lambda Lambda')`` and ``e ~ N(0, sigma^2 I)``.
``Lambda`` is parameterized by log relative standard deviations plus, for
the correlated spec, unconstrained entries that generate a correlation
Cholesky factor; both the scale ``sigma^2`` and the fixed effects are
profiled out, so the optimizer only sees the covariance shape parameters.

Everything the profiled deviance needs is reduced to per-group
cross-products up front, making one evaluation O(groups * q^2 * p)
regardless of the number of rows.
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .errors import ConvergenceFailure, InsufficientData, SingularDesign

RANDOM_SPECS = ("unique", "correlated", "orthogonal", "fixed")
MAX_CORRELATED_PREDICTORS = 8
BOUNDARY_REL_SD = 1e-3


@dataclass(frozen=True)
class LmmFit:
    """REML fit of one univariate mixed model.

    ``fixed`` is laid out [intercept?, within..., between...]; the slice
    helpers recover the pieces. ``blups`` are per-group deviations from the
    fixed effects for the random-design columns, ``residuals`` the
    conditional (subject-specific) residuals aligned with the input rows.
    """

    fixed: np.ndarray
    fixed_se: np.ndarray
    fixed_p: np.ndarray
    random_cov: np.ndarray
    blups: np.ndarray
    residuals: np.ndarray
    reml_deviance: float
    sigma2: float
    boundary: bool
    group_ids: tuple
    random: str
    has_intercept: bool
    n_within: int
    n_between: int
    theta: np.ndarray = None

    @property
    def within_slice(self):
        start = 1 if self.has_intercept else 0
        return slice(start, start + self.n_within)

    @property
    def between_slice(self):
        start = (1 if self.has_intercept else 0) + self.n_within
        return slice(start, start + self.n_between)

    @property
    def intercept_variance(self):
        if self.random_cov is None or not self.has_intercept:
            return None
        return float(self.random_cov[0, 0])


def _corr_chol(q, w):
    """Unit-row lower-triangular factor; L @ L.T is a correlation matrix."""
    lmat = np.zeros((q, q))
    lmat[0, 0] = 1.0
    pos = 0
    for i in range(1, q):
        row = np.empty(i + 1)
        row[:i] = w[pos:pos + i]
        row[i] = 1.0
        lmat[i, :i + 1] = row / np.sqrt(row @ row)
        pos += i
    return lmat


def _lambda_factor(theta, q, random):
    sd = np.exp(theta[:q])
    if random == "orthogonal":
        return np.diag(sd)
    return sd[:, None] * _corr_chol(q, theta[q:])


def _n_theta(q, random):
    return q if random == "orthogonal" else q + q * (q - 1) // 2


class _RemlProblem:
    """Cross-product sufficient statistics plus the profiled deviance."""

    def __init__(self, y, x, z, group_index, n_groups, random):
        self.n, self.p = x.shape
        self.q = z.shape[1]
        self.random = random
        self.xtx = x.T @ x
        self.xty = x.T @ y
        self.yty = float(y @ y)
        ztz = np.zeros((n_groups, self.q, self.q))
        xtz = np.zeros((n_groups, self.p, self.q))
        zty = np.zeros((n_groups, self.q))
        for g in range(n_groups):
            rows = group_index == g
            zg = z[rows]
            ztz[g] = zg.T @ zg
            xtz[g] = x[rows].T @ zg
            zty[g] = zg.T @ y[rows]
        self.ztz, self.xtz, self.zty = ztz, xtz, zty
        self.df = self.n - self.p

    def _parts(self, lam):
        ata = lam.T @ self.ztz @ lam
        m = ata + np.eye(self.q)
        chol = np.linalg.cholesky(m)  # raises LinAlgError when not PD
        logdet_v = 2.0 * float(np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2))))
        u = self.xtz @ lam
        t = self.zty @ lam  # (G, q) rows are Lambda' Z_g' y
        minv_t = np.linalg.solve(m, t[..., None])[..., 0]
        minv_ut = np.linalg.solve(m, np.swapaxes(u, 1, 2))
        xtvx = self.xtx - np.einsum("gik,gkj->ij", u, minv_ut)
        xtvy = self.xty - np.einsum("gik,gk->i", u, minv_t)
        ytvy = self.yty - float(np.einsum("gk,gk->", t, minv_t))
        return m, logdet_v, xtvx, xtvy, ytvy

    def deviance(self, theta):
        lam = _lambda_factor(theta, self.q, self.random)
        try:
            _, logdet_v, xtvx, xtvy, ytvy = self._parts(lam)
            sign, logdet_x = np.linalg.slogdet(xtvx)
            if sign <= 0:
                return np.inf
            beta = np.linalg.solve(xtvx, xtvy)
        except np.linalg.LinAlgError:
            return np.inf
        quad = ytvy - float(xtvy @ beta)
        if quad <= 0:
            return np.inf
        sigma2 = quad / self.df
        return float(self.df * np.log(2.0 * np.pi * sigma2) + logdet_v + logdet_x + self.df)

    def solution(self, theta):
        lam = _lambda_factor(theta, self.q, self.random)
        m, logdet_v, xtvx, xtvy, ytvy = self._parts(lam)
        beta = np.linalg.solve(xtvx, xtvy)
        quad = ytvy - float(xtvy @ beta)
        sigma2 = quad / self.df
        cov_beta = sigma2 * np.linalg.inv(xtvx)
        ztr = self.zty - np.einsum("gpk,p->gk", self.xtz, beta)
        blups = np.einsum(
            "ij,gj->gi", lam, np.linalg.solve(m, (ztr @ lam)[..., None])[..., 0]
        )
        return beta, cov_beta, sigma2, blups, lam


def _theta_start(y, z, group_index, n_groups, q, random):
    """Moment-based starting point for the covariance parameters.

    Per-group OLS coefficients on the random design give a crude spread
    estimate; subtracting their average sampling variance and scaling by
    the pooled residual variance lands close to the REML answer, which
    keeps the optimizer away from the flat small-variance plateau of the
    log parameterization.
    """
    coefs, samp = [], []
    resid_ss, resid_df = 0.0, 0
    for g in range(n_groups):
        rows = group_index == g
        zg = z[rows]
        yg = y[rows]
        if zg.shape[0] <= q + 1:
            continue
        gram = zg.T @ zg
        try:
            ginv = np.linalg.inv(gram)
        except np.linalg.LinAlgError:
            continue
        c = ginv @ (zg.T @ yg)
        r = yg - zg @ c
        df = zg.shape[0] - q
        coefs.append(c)
        samp.append((r @ r) / df * np.diag(ginv))
        resid_ss += float(r @ r)
        resid_df += df
    if len(coefs) < 2 or resid_df < 1:
        return None
    coefs = np.array(coefs)
    sigma2_0 = resid_ss / resid_df
    psi0 = np.clip(coefs.var(axis=0, ddof=1) - np.mean(samp, axis=0),
                   1e-4 * sigma2_0, None)
    rel = np.clip(np.sqrt(psi0 / sigma2_0), 0.02, 3.0)
    theta = np.zeros(_n_theta(q, random))
    theta[:q] = np.log(rel)
    return theta


def _pvalue(z, method, df):
    if method == "t":
        return 2.0 * stats.t.sf(np.abs(z), df)
    return 2.0 * stats.norm.sf(np.abs(z))


def _encode_groups(groups):
    seen = {}
    index = np.empty(len(groups), dtype=np.intp)
    for i, g in enumerate(groups):
        index[i] = seen.setdefault(g, len(seen))
    return index, tuple(seen)


def _ols(y, x):
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < x.shape[1]:
        raise SingularDesign("fixed-effect design is rank deficient")
    resid = y - x @ coef
    return coef, resid


def fit_lmm_reml(y, x_within, x_between=None, groups=None, random="correlated",
                 include_intercept=True, random_intercept=True, pvalues="z",
                 theta0=None, max_iter=500):
    """Fit one univariate multilevel regression.

    ``x_within`` columns get fixed effects plus (for correlated/orthogonal)
    per-group random slopes; ``x_between`` columns are group-level
    predictors with fixed effects only; the intercept, when included, gets
    a random counterpart as well. ``random='fixed'`` is pooled OLS,
    ``random='unique'`` fits a separate OLS per group and summarizes the
    spread.

    All-zero predictor columns are excluded with a degenerate-regressor
    guard (coefficient 0, infinite standard error) instead of poisoning the
    rank check.
    """
    if random not in RANDOM_SPECS:
        raise ValueError(f"random must be one of {RANDOM_SPECS}")
    y = np.asarray(y, dtype=np.float64).ravel()
    xw = np.atleast_2d(np.asarray(x_within, dtype=np.float64))
    if xw.shape[0] != y.shape[0]:
        xw = xw.T
    xb = None
    if x_between is not None:
        xb = np.atleast_2d(np.asarray(x_between, dtype=np.float64))
        if xb.shape[0] != y.shape[0]:
            xb = xb.T
    if groups is None:
        groups = np.zeros(y.shape[0], dtype=int)
    group_index, group_ids = _encode_groups(np.asarray(groups))
    n_groups = len(group_ids)
    if random in ("correlated", "orthogonal") and n_groups < 2:
        raise InsufficientData("multilevel specs need at least 2 groups")
    if random == "correlated" and xw.shape[1] > MAX_CORRELATED_PREDICTORS:
        raise ValueError(
            f"correlated random effects support at most {MAX_CORRELATED_PREDICTORS} "
            "within predictors; use random='orthogonal'"
        )

    n_within = xw.shape[1]
    n_between = 0 if xb is None else xb.shape[1]
    cols = [np.ones((y.shape[0], 1))] if include_intercept else []
    cols.append(xw)
    if xb is not None:
        cols.append(xb)
    x_full = np.hstack(cols)
    p_full = x_full.shape[1]

    # degenerate-regressor guard: all-zero columns are unidentifiable
    zero_cols = np.flatnonzero(np.max(np.abs(x_full), axis=0) == 0.0)
    keep_cols = np.setdiff1d(np.arange(p_full), zero_cols)
    x = x_full[:, keep_cols]

    off = 1 if include_intercept else 0
    zero_within = np.array([c - off for c in zero_cols if off <= c < off + n_within],
                           dtype=int)

    def expand(vec, fill):
        out = np.full(p_full, fill, dtype=np.float64)
        out[keep_cols] = vec
        return out

    if random == "fixed":
        fit = _fit_pooled_ols(y, x, pvalues)
    elif random == "unique":
        if xb is not None:
            raise ValueError("between predictors are constant within groups; "
                             "random='unique' cannot estimate them")
        fit = _fit_unique(y, x, group_index, n_groups, pvalues)
        beta, se, pv, rc, blups, resid, dev, sigma2, boundary, theta = fit
        # per-group coefficient layout must match the full design layout
        blups_full = np.zeros((n_groups, p_full))
        blups_full[:, keep_cols] = blups
        rc_full = np.zeros((p_full, p_full))
        rc_full[np.ix_(keep_cols, keep_cols)] = rc
        fit = (beta, se, pv, rc_full, blups_full, resid, dev, sigma2, boundary, theta)
    else:
        fit = _fit_reml(y, x, xw, zero_within, group_index, n_groups, random,
                        include_intercept, random_intercept, pvalues, theta0,
                        max_iter)
    beta, se, pv, random_cov, blups, resid, dev, sigma2, boundary, theta = fit

    return LmmFit(
        fixed=expand(beta, 0.0),
        fixed_se=expand(se, np.inf),
        fixed_p=expand(pv, 1.0),
        random_cov=random_cov,
        blups=blups,
        residuals=resid,
        reml_deviance=dev,
        sigma2=sigma2,
        boundary=boundary,
        group_ids=group_ids,
        random=random,
        has_intercept=include_intercept,
        n_within=n_within,
        n_between=n_between,
        theta=theta,
    )


def _fit_pooled_ols(y, x, pvalues):
    n, p = x.shape
    if n <= p:
        raise InsufficientData("need more rows than fixed effects")
    coef, resid = _ols(y, x)
    df = n - p
    sigma2 = float(resid @ resid) / df
    cov = sigma2 * np.linalg.inv(x.T @ x)
    se = np.sqrt(np.diag(cov))
    pv = _pvalue(coef / se, pvalues, df)
    dev = float(df * np.log(2.0 * np.pi * sigma2) + np.linalg.slogdet(x.T @ x)[1] + df)
    return coef, se, pv, None, None, resid, dev, sigma2, False, None


def _fit_unique(y, x, group_index, n_groups, pvalues):
    n, p = x.shape
    coefs = np.empty((n_groups, p))
    resid = np.empty(n)
    rss = 0.0
    for g in range(n_groups):
        rows = group_index == g
        if int(rows.sum()) <= p:
            raise InsufficientData(f"group {g} has too few rows for a unique fit")
        coefs[g], r = _ols(y[rows], x[rows])
        resid[rows] = r
        rss += float(r @ r)
    beta = coefs.mean(axis=0)
    if n_groups > 1:
        se = coefs.std(axis=0, ddof=1) / np.sqrt(n_groups)
        random_cov = np.cov(coefs, rowvar=False).reshape(p, p)
    else:
        se = np.full(p, np.inf)
        random_cov = np.zeros((p, p))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.where(beta == 0.0, 0.0, np.inf))
    pv = _pvalue(z, pvalues, max(n_groups - 1, 1))
    sigma2 = rss / max(n - n_groups * p, 1)
    return beta, se, pv, random_cov, coefs - beta, resid, np.nan, sigma2, False, None


def _fit_reml(y, x, xw, zero_within, group_index, n_groups, random,
              include_intercept, random_intercept, pvalues, theta0, max_iter):
    n, p = x.shape
    if n <= p:
        raise InsufficientData("need more rows than fixed effects")
    if np.linalg.matrix_rank(x) < p:
        raise SingularDesign("fixed-effect design is rank deficient")
    z_cols = []
    if include_intercept and random_intercept:
        z_cols.append(np.ones((n, 1)))
    keep_w = np.setdiff1d(np.arange(xw.shape[1]), zero_within)
    z_cols.append(xw[:, keep_w])
    z = np.hstack(z_cols)
    q = z.shape[1]

    problem = _RemlProblem(y, x, z, group_index, n_groups, random)
    n_par = _n_theta(q, random)
    if theta0 is not None:
        theta0 = np.asarray(theta0, dtype=np.float64)
        if theta0.shape != (n_par,):
            raise ValueError(f"theta0 must have {n_par} entries")
        starts = [theta0]
    else:
        start = _theta_start(y, z, group_index, n_groups, q, random)
        starts = [] if start is None else [start]
        fallback = np.zeros(n_par)
        fallback[:q] = np.log(0.3)
        starts.append(fallback)

    bounds = [(-12.0, 8.0)] * q + [(-30.0, 30.0)] * (n_par - q)
    opts = {"maxiter": max_iter, "maxfun": 20 * max_iter * (n_par + 1), "eps": 1e-5}

    res = None
    for i, start in enumerate(starts):
        cand = optimize.minimize(problem.deviance, start, method="L-BFGS-B",
                                 bounds=bounds, options=opts)
        if res is None or (np.isfinite(cand.fun) and cand.fun < res.fun):
            res = cand
        # retry from the alternative start only when the first run slid to
        # the small-variance plateau, where finite differences go flat
        if i == 0 and len(starts) > 1 and np.any(res.x[:q] > np.log(BOUNDARY_REL_SD)):
            break
    if not np.isfinite(res.fun):
        raise ConvergenceFailure("REML optimization diverged", trace=res)
    if not res.success and res.status not in (1, 2):
        raise ConvergenceFailure(f"REML optimizer failed: {res.message}", trace=res)
    # status 2 (line-search breakdown) at a finite-difference stationary
    # point is normal; only reject when there was no progress at all
    if not res.success and res.fun > min(problem.deviance(s) for s in starts) + 1e-8:
        raise ConvergenceFailure(f"REML optimizer failed: {res.message}", trace=res)

    theta = res.x
    beta, cov_beta, sigma2, blups_z, lam = problem.solution(theta)
    se = np.sqrt(np.diag(cov_beta))
    pv = _pvalue(beta / se, pvalues, problem.df)
    random_cov = sigma2 * (lam @ lam.T)
    if random == "orthogonal":
        random_cov = np.diag(np.diag(random_cov))
    rel_sd = np.sqrt(np.diag(lam @ lam.T))
    boundary = bool(np.any(rel_sd < BOUNDARY_REL_SD))
    resid = y - x @ beta - np.einsum("ij,ij->i", z, blups_z[group_index])

    # place BLUPs back into intercept+within layout (zero for dropped cols)
    q_out = (1 if include_intercept and random_intercept else 0) + xw.shape[1]
    blups = np.zeros((n_groups, q_out))
    out_cols = []
    if include_intercept and random_intercept:
        out_cols.append(0)
        out_cols += [1 + c for c in keep_w]
    else:
        out_cols += list(keep_w)
    blups[:, out_cols] = blups_z
    cov_full = np.zeros((q_out, q_out))
    cov_full[np.ix_(out_cols, out_cols)] = random_cov
    return (beta, se, pv, cov_full, blups, resid, float(res.fun), sigma2,
            boundary, theta)
