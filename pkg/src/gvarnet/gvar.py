"""Lag-1 graphical VAR estimation for a single series.

The model regresses each measurement occasion on the previous one,

    y_t = mu + B (y_{t-1} - mu) + e_t,     e_t ~ N(0, Theta),

yielding two networks: the directed temporal network ``B`` (row = response
at t, column = predictor at t-1, self-loops allowed) and the undirected
contemporaneous network, the partial-correlation structure of the residual
precision ``K = Theta^{-1}``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConvergenceFailure, InsufficientData, NonStationary, SingularDesign
from .ggm import CovMatrix, GgmNetwork, PrecisionMatrix, partial_correlations
from .glasso import DEFAULT_KKT_TOL, ebic as ggm_ebic, glasso, glasso_state


def _freeze(a, dtype=np.float64):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeSeries:
    """One subject's repeated measures: (T, m) values with a missing mask
    and optional per-occasion day labels."""

    values: np.ndarray
    missing: np.ndarray = None
    day_index: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be a (T, m) matrix")
        if self.missing is None:
            miss = ~np.isfinite(v)
        else:
            miss = np.asarray(self.missing, dtype=bool) | ~np.isfinite(v)
        if miss.shape != v.shape:
            raise ValueError("missing mask shape must match values")
        day = self.day_index
        if day is not None:
            day = np.asarray(day)
            if day.shape != (v.shape[0],):
                raise ValueError("day_index must have one entry per occasion")
            day = np.ascontiguousarray(day)
            day.flags.writeable = False
        v = v.copy()
        v[miss] = np.nan
        object.__setattr__(self, "values", _freeze(v))
        miss = np.ascontiguousarray(miss)
        miss.flags.writeable = False
        object.__setattr__(self, "missing", miss)
        object.__setattr__(self, "day_index", day)

    @property
    def t(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class LaggedDesign:
    """Paired (previous, current) occasions with no missing cells."""

    current: np.ndarray
    lagged: np.ndarray

    def __post_init__(self):
        cur = np.asarray(self.current, dtype=np.float64)
        lag = np.asarray(self.lagged, dtype=np.float64)
        if cur.shape != lag.shape or cur.ndim != 2:
            raise ValueError("current and lagged must be matching (T', m) matrices")
        if np.any(~np.isfinite(cur)) or np.any(~np.isfinite(lag)):
            raise ValueError("lagged design must not contain missing cells")
        object.__setattr__(self, "current", _freeze(cur))
        object.__setattr__(self, "lagged", _freeze(lag))

    @property
    def rows(self):
        return self.current.shape[0]

    @property
    def m(self):
        return self.current.shape[1]


@dataclass(frozen=True)
class GvarModel:
    """Estimated lag-1 model: temporal coefficients, residual precision and
    the derived contemporaneous network."""

    beta: np.ndarray
    theta_precision: PrecisionMatrix
    contemporaneous: GgmNetwork
    means: np.ndarray
    temporal_included: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        inc = np.asarray(self.temporal_included, dtype=bool)
        if b.shape != inc.shape or b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError("beta and temporal_included must be matching square matrices")
        if np.any((b != 0.0) & ~inc):
            raise ValueError("excluded temporal edges must have zero coefficients")
        object.__setattr__(self, "beta", _freeze(b))
        inc = np.ascontiguousarray(inc)
        inc.flags.writeable = False
        object.__setattr__(self, "temporal_included", inc)
        object.__setattr__(self, "means", _freeze(np.asarray(self.means, dtype=np.float64)))

    @property
    def m(self):
        return self.beta.shape[0]


def lagged_row_pairs(series, day_policy="break"):
    """Indices (t-1, t) of usable consecutive pairs under the day policy
    and pairwise deletion of occasions with any missing cell."""
    if day_policy not in ("break", "bridge"):
        raise ValueError("day_policy must be 'break' or 'bridge'")
    complete = ~series.missing.any(axis=1)
    pairs = []
    for t in range(1, series.t):
        if not (complete[t - 1] and complete[t]):
            continue
        if (
            day_policy == "break"
            and series.day_index is not None
            and series.day_index[t] != series.day_index[t - 1]
        ):
            continue
        pairs.append((t - 1, t))
    return pairs


def build_lagged_design(series, day_policy="break", missing_policy="pairwise_delete"):
    """Turn a time series into responses at t paired with predictors at t-1.

    Under ``day_policy='break'`` no pair spans a day boundary (the first
    measurement of a day is never regressed on the last of the previous
    day); ``'bridge'`` pairs across boundaries. The only missing-data
    policy is pairwise deletion: a pair is dropped when either occasion has
    any missing cell.
    """
    if missing_policy != "pairwise_delete":
        raise ValueError("only missing_policy='pairwise_delete' is supported")
    if series.t < 2:
        raise InsufficientData("need at least 2 occasions to build a lagged design")
    pairs = lagged_row_pairs(series, day_policy)
    if not pairs:
        raise InsufficientData("no usable lagged/current pairs after deletion")
    prev = np.array([series.values[a] for a, _ in pairs])
    cur = np.array([series.values[b] for _, b in pairs])
    return LaggedDesign(current=cur, lagged=prev)


def _centered(design, center):
    x = design.lagged
    y = design.current
    if center:
        means = y.mean(axis=0)
        return x - x.mean(axis=0), y - means, means
    return x, y, np.zeros(design.m)


def fit_var_ols(design, center=True):
    """Saturated least-squares fit: multivariate regression of the current
    occasion on the previous one, residual covariance inverted into the
    contemporaneous network.
    """
    n, m = design.current.shape
    if n <= m + 1:
        raise InsufficientData(f"need more than m+1={m + 1} usable rows, got {n}")
    x, y, means = _centered(design, center)
    if np.linalg.matrix_rank(x) < m:
        raise SingularDesign("lagged predictors are rank deficient")
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)  # (m, m): predictor by response
    resid = y - x @ coef
    theta = CovMatrix(resid.T @ resid / n, n=n)
    k = precision_of(theta)
    beta = coef.T
    return GvarModel(
        beta=beta,
        theta_precision=k,
        contemporaneous=partial_correlations(k),
        means=means,
        temporal_included=np.ones((m, m), dtype=bool),
    )


def precision_of(theta):
    from .ggm import precision_from_covariance

    return precision_from_covariance(theta)


def _mrce_objective(syy, s, h, c, k, lam_b, lam_k):
    s_r = syy - h.T @ c - c.T @ h + c.T @ s @ c
    kv = k.values
    sign, logdet = np.linalg.slogdet(kv)
    if sign <= 0:
        return np.inf, s_r
    off = ~np.eye(kv.shape[0], dtype=bool)
    obj = (
        float(np.sum(s_r * kv))
        - logdet
        + lam_b * float(np.sum(np.abs(c)))
        + lam_k * float(np.sum(np.abs(kv[off])))
    )
    return obj, s_r


def mrce_fit(design, lambda_beta, lambda_kappa, center=True, max_outer=200,
             tol=1e-5, kkt_tol=DEFAULT_KKT_TOL, init=None):
    """Joint sparse estimation of the temporal coefficients and the residual
    precision.

    Alternates (a) cyclic coordinate descent on B under an L1 penalty
    weighted by the current residual precision with (b) a glasso update of
    that precision on the implied residual covariance, until the largest
    parameter change drops below ``tol``. The joint penalized objective is
    non-increasing across outer iterations; an increase beyond numerical
    slack aborts with the trace attached.
    """
    if lambda_beta < 0 or lambda_kappa < 0:
        raise ValueError("penalties must be nonnegative")
    n, m = design.current.shape
    if n < 2:
        raise InsufficientData("need at least 2 usable rows")
    x, y, means = _centered(design, center)
    s = x.T @ x / n
    h = x.T @ y / n
    syy = y.T @ y / n

    if init is not None:
        c = init[0].T.copy()  # stored as beta (response by predictor)
        k = init[1]
    else:
        c = np.zeros((m, m))
        k = None
    state = glasso_state(k) if k is not None else None

    trace = []
    prev_obj = np.inf
    for _ in range(max_outer):
        s_r = syy - h.T @ c - c.T @ h + c.T @ s @ c
        s_r = CovMatrix((s_r + s_r.T) / 2.0, n=n)
        k_new = glasso(s_r, lambda_kappa, kkt_tol=kkt_tol, init=state)
        state = glasso_state(k_new)
        c_new, _ = _kernels.mrce_cd(s, h, k_new.values, c, lambda_beta,
                                    max_sweeps=500, tol=1e-9)
        obj, _ = _mrce_objective(syy, s, h, c_new, k_new, lambda_beta, lambda_kappa)
        trace.append(obj)
        # the glasso half-step is solved to a KKT tolerance, not exactly, so
        # allow slack of that order before declaring oscillation
        if obj > prev_obj + 10.0 * kkt_tol * max(1.0, abs(prev_obj)):
            raise ConvergenceFailure(
                "joint objective increased across outer iterations", trace=trace
            )
        delta = max(
            float(np.max(np.abs(c_new - c), initial=0.0)),
            float(np.max(np.abs(k_new.values - k.values), initial=0.0)) if k is not None else np.inf,
        )
        c, k, prev_obj = c_new, k_new, obj
        if delta < tol:
            beta = c.T
            return GvarModel(
                beta=beta,
                theta_precision=k,
                contemporaneous=partial_correlations(k),
                means=means,
                temporal_included=beta != 0.0,
            )
    raise ConvergenceFailure(
        f"MRCE did not converge in {max_outer} outer iterations", trace=trace
    )


def gvar_ebic(model, design, gamma, center=True):
    """Joint EBIC of a fitted model on its design.

    The edge count sums nonzero temporal coefficients and nonzero
    upper-triangular residual-precision entries; both parameter families
    compete against the same m*m candidate pool, so the extended penalty
    term is ``4 * gamma * E * log(m)`` as in the cross-sectional case.
    """
    n, m = design.current.shape
    x, y, _ = _centered(design, center)
    c = model.beta.T
    s_r = (y - x @ c).T @ (y - x @ c) / n
    kv = model.theta_precision.values
    sign, logdet = np.linalg.slogdet(kv)
    if sign <= 0:
        return np.inf
    ll = 0.5 * n * (logdet - float(np.sum(s_r * kv)))
    e = int(np.count_nonzero(model.beta)) + int(np.count_nonzero(np.triu(kv, k=1)))
    return float(-2.0 * ll + e * np.log(n) + 4.0 * e * gamma * np.log(m))


def default_gvar_grids(design, n_beta=10, n_kappa=10, ratio=0.01, center=True):
    """Log-spaced penalty grids spanning empty to dense models.

    The kappa grid tops out at the smallest penalty giving a diagonal
    residual precision; the beta grid at the smallest penalty zeroing every
    temporal coefficient when the precision is at its fully shrunk
    (diagonal) end.
    """
    n, m = design.current.shape
    x, y, _ = _centered(design, center)
    h = x.T @ y / n
    syy = y.T @ y / n
    off = syy[~np.eye(m, dtype=bool)]
    kappa_max = float(np.max(np.abs(off), initial=0.0)) or 1e-4
    k0 = 1.0 / np.clip(np.diag(syy), 1e-12, None)
    beta_max = 2.0 * float(np.max(np.abs(h * k0[None, :]), initial=0.0)) or 1e-4
    return (
        np.geomspace(beta_max, beta_max * ratio, n_beta),
        np.geomspace(kappa_max, kappa_max * ratio, n_kappa),
    )


def gvar_ebic_search(design, grid_beta=None, grid_kappa=None, gamma=0.25,
                     n_beta=10, n_kappa=10, center=True, max_outer=200,
                     kkt_tol=DEFAULT_KKT_TOL):
    """Fit the penalty grid and return the EBIC-minimizing joint model.

    Cells are visited in a fixed order (both penalties descending, kappa in
    the inner loop) with warm starts from the previous cell; ties in EBIC
    break toward the sparser model (fewer total edges), then toward larger
    penalties via the visiting order.
    """
    if grid_beta is None or grid_kappa is None:
        gb, gk = default_gvar_grids(design, n_beta=n_beta, n_kappa=n_kappa, center=center)
        grid_beta = gb if grid_beta is None else grid_beta
        grid_kappa = gk if grid_kappa is None else grid_kappa
    grid_beta = np.sort(np.asarray(grid_beta, dtype=np.float64))[::-1]
    grid_kappa = np.sort(np.asarray(grid_kappa, dtype=np.float64))[::-1]
    if grid_beta.size == 0 or grid_kappa.size == 0:
        raise ValueError("penalty grids must be nonempty")

    best = None
    best_score = (np.inf, np.inf)
    failures = []
    row_start = None
    for lb in grid_beta:
        warm = row_start
        for lk in grid_kappa:
            try:
                fit = mrce_fit(design, lb, lk, center=center, max_outer=max_outer,
                               kkt_tol=kkt_tol, init=warm)
            except ConvergenceFailure as exc:
                failures.append(((lb, lk), exc))
                continue
            warm = (fit.beta, fit.theta_precision)
            if lk == grid_kappa[0]:
                row_start = warm
            e = int(np.count_nonzero(fit.beta)) + fit.contemporaneous.edge_count
            score = (gvar_ebic(fit, design, gamma, center=center), e)
            if score < best_score:
                best_score = score
                best = fit
    if best is None:
        raise ConvergenceFailure("every grid cell failed", trace=failures)
    return best


def stationary_covariance(beta, theta):
    """Stationary covariance implied by stable lag-1 dynamics.

    Solves ``vec(Sigma) = (I - B (x) B)^{-1} vec(Theta)`` and verifies the
    fixed-point identity ``Sigma = B Sigma B' + Theta`` to 1e-10.
    """
    b = np.asarray(beta, dtype=np.float64)
    tv = theta.values if isinstance(theta, CovMatrix) else np.asarray(theta, dtype=np.float64)
    m = b.shape[0]
    radius = spectral_radius(b)
    if radius >= 1.0:
        raise NonStationary(f"spectral radius {radius:.6f} >= 1")
    eye = np.eye(m * m)
    vec_sigma = np.linalg.solve(eye - np.kron(b, b), tv.reshape(-1, order="F"))
    sigma = vec_sigma.reshape((m, m), order="F")
    sigma = (sigma + sigma.T) / 2.0
    resid = np.max(np.abs(sigma - b @ sigma @ b.T - tv))
    if resid > 1e-10:
        raise NonStationary(
            f"stationary solve left residual {resid:.3g}; dynamics too close to the unit circle"
        )
    return CovMatrix(sigma, n=0)


def spectral_radius(beta):
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(beta, dtype=np.float64)))))


def standardize_temporal(model):
    """Rescale temporal coefficients by the implied stationary standard
    deviations: ``b_ij * sd_j / sd_i``.

    The result is invariant to diagonal rescaling of the variables, making
    temporal edges comparable across differently scaled inputs.
    """
    theta = np.linalg.inv(model.theta_precision.values)
    sigma = stationary_covariance(model.beta, CovMatrix((theta + theta.T) / 2.0, n=0))
    sd = np.sqrt(np.diag(sigma.values))
    return model.beta * (sd[None, :] / sd[:, None])


def simulate_gvar(beta, theta, occasions, rng, mu=None, stationary_start=True):
    """Draw a length-``occasions`` series from lag-1 dynamics.

    The first occasion comes from the stationary distribution so the whole
    series is stationary; innovations are Gaussian with covariance
    ``theta``.
    """
    m = beta.shape[0]
    mu = np.zeros(m) if mu is None else np.asarray(mu, dtype=np.float64)
    tv = theta.values if isinstance(theta, CovMatrix) else np.asarray(theta, dtype=np.float64)
    chol_theta = np.linalg.cholesky(tv)
    out = np.empty((occasions, m))
    if stationary_start:
        sigma = stationary_covariance(beta, tv)
        start = np.linalg.cholesky(sigma.values) @ rng.standard_normal(m)
    else:
        start = chol_theta @ rng.standard_normal(m)
    out[0] = mu + start
    for t in range(1, occasions):
        eps = chol_theta @ rng.standard_normal(m)
        out[t] = mu + beta @ (out[t - 1] - mu) + eps
    return out
