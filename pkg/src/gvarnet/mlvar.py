"""Multilevel graphical VAR for panel data (n > 1 subjects).

Two estimators for the three network structures (temporal, contemporaneous,
between-subjects):

* ``mlvar_two_step``: nodewise multilevel regressions. Step 1 regresses
  each variable on the within-subject centered previous occasion (level 1)
  and on the other variables' subject means (level 2), giving the temporal
  and between-subjects networks; step 2 regresses each step-1 residual on
  the other residuals at the same occasion, giving the contemporaneous
  networks. Undirected edges come from two regressions each, so they carry
  two p-values, combined by an "and" or "or" rule.

* ``pooled_individual_lasso``: the joint sparse estimator from the
  single-subject module on the pooled within-centered data (fixed
  networks), a penalized network on the subject means (between), and
  separate per-subject fits (individual networks, no pooling).
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GvarnetError, InsufficientData
from .ggm import GgmNetwork, sample_covariance
from .glasso import ebic_glasso
from .gvar import LaggedDesign, TimeSeries, build_lagged_design, fit_var_ols, gvar_ebic_search, lagged_row_pairs
from .lmm import RANDOM_SPECS, fit_lmm_reml


@dataclass(frozen=True)
class PanelData:
    """Time series of several subjects sharing the same variables."""

    subjects: dict
    labels: tuple

    def __post_init__(self):
        if not self.subjects:
            raise ValueError("panel needs at least one subject")
        labels = tuple(str(x) for x in self.labels)
        m = len(labels)
        for sid, series in self.subjects.items():
            if not isinstance(series, TimeSeries):
                raise TypeError(f"subject {sid!r} is not a TimeSeries")
            if series.m != m:
                raise ValueError(f"subject {sid!r} has {series.m} variables, expected {m}")
        object.__setattr__(self, "subjects", dict(self.subjects))
        object.__setattr__(self, "labels", labels)

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def m(self):
        return len(self.labels)

    @property
    def ids(self):
        return tuple(self.subjects)


@dataclass(frozen=True)
class MlVarFit:
    """Fixed, per-subject and between-subjects networks with their
    significance information.

    ``temporal_p`` has one p-value per directed edge; the contemporaneous
    and between networks carry two per undirected edge (one per nodewise
    regression), stored with ``pvals[i, j]`` = p-value of predictor j in
    the regression of node i. Per-subject contemporaneous networks are
    saturated by construction; ``contemporaneous_valid`` flags whether each
    subject's implied precision was positive definite.
    """

    labels: tuple
    subject_ids: tuple
    temporal_fixed: np.ndarray
    temporal_se: np.ndarray
    temporal_p: np.ndarray
    temporal_subject: np.ndarray
    temporal_sd: np.ndarray
    contemporaneous_fixed: GgmNetwork
    contemporaneous_p: np.ndarray
    contemporaneous_subject: tuple
    contemporaneous_valid: tuple
    contemporaneous_sd: np.ndarray
    between: GgmNetwork
    between_p: np.ndarray
    subject_means: np.ndarray
    random: str
    estimator: str = "two-step"
    warnings_: tuple = field(default=())


def within_center(panel):
    """Subtract each subject's per-variable mean of its non-missing cells.

    Returns the centered panel and the (n_subjects, m) matrix of means,
    which double as the plug-in estimates of the stationary means.
    """
    centered = {}
    means = np.empty((panel.n_subjects, panel.m))
    for row, (sid, series) in enumerate(panel.subjects.items()):
        vals = series.values
        ok = ~series.missing
        for j in range(panel.m):
            if not ok[:, j].any():
                raise InsufficientData(
                    f"subject {sid!r} has no observed values for {panel.labels[j]!r}"
                )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mu = np.nanmean(np.where(ok, vals, np.nan), axis=0)
        means[row] = mu
        centered[sid] = TimeSeries(vals - mu, missing=series.missing,
                                   day_index=series.day_index)
    return PanelData(centered, panel.labels), means


def panel_lagged_designs(panel, day_policy="break"):
    """Per-subject lagged designs plus the surviving row bookkeeping.

    Returns (designs, row_pairs) keyed by subject id; subjects with no
    usable rows are skipped with a warning entry instead of failing the
    whole panel.
    """
    designs, pairs, skipped = {}, {}, []
    for sid, series in panel.subjects.items():
        try:
            d = build_lagged_design(series, day_policy=day_policy)
        except InsufficientData:
            skipped.append(sid)
            continue
        designs[sid] = d
        pairs[sid] = lagged_row_pairs(series, day_policy)
    return designs, pairs, skipped


def _nodewise_partials(gamma, resid_vars):
    """Standardize-and-average nodewise coefficients into partials.

    Each regression standardizes its own row, ``r_ij = gamma_ij *
    sqrt(var_j / var_i)``; the two per-edge estimates are averaged.
    """
    v = np.asarray(resid_vars, dtype=np.float64)
    scale = np.sqrt(v[None, :] / v[:, None])
    r_one = gamma * scale
    r = (r_one + r_one.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return r


def between_network(b_mu, residual_variances, labels=None):
    """Between-subjects network from level-2 nodewise coefficients.

    ``b_mu[i, j]`` predicts subject mean i from subject mean j; the implied
    precision ``K = D(I - B)`` is standardized into partial correlations
    and the two per-edge estimates are averaged. Callers keep the paired
    p-values of the two source regressions for thresholding.
    """
    b_mu = np.asarray(b_mu, dtype=np.float64)
    rv = np.asarray(residual_variances, dtype=np.float64)
    if np.any(rv <= 0):
        raise ValueError("residual variances must be positive")
    r = np.clip(_nodewise_partials(b_mu, rv), -1.0, 1.0)
    included = r != 0.0
    np.fill_diagonal(included, False)
    return GgmNetwork(r, included, labels)


def threshold_rule(network, p_a, p_b=None, rule="and", alpha=0.05):
    """Keep edges by significance of the regression(s) behind them.

    With two p-value matrices (undirected edges estimated twice) the "and"
    rule requires both below alpha, the "or" rule either; with one matrix
    (directed temporal edges) the single p-value decides. Removed edges are
    zeroed.
    """
    if rule not in ("and", "or"):
        raise ValueError("rule must be 'and' or 'or'")
    pa = np.asarray(p_a, dtype=np.float64)
    if p_b is None:
        keep = pa < alpha
    else:
        pb = np.asarray(p_b, dtype=np.float64)
        if rule == "and":
            keep = (pa < alpha) & (pb < alpha)
        else:
            keep = (pa < alpha) | (pb < alpha)
    keep = keep & keep.T if p_b is not None else keep
    keep = keep & network.included
    partials = np.where(keep, network.partials, 0.0)
    np.fill_diagonal(partials, 1.0)
    return GgmNetwork(partials, keep, network.labels)


def threshold_temporal(beta, pvalues, alpha=0.05):
    """Zero temporal coefficients whose Wald p-value is >= alpha."""
    b = np.asarray(beta, dtype=np.float64)
    keep = np.asarray(pvalues, dtype=np.float64) < alpha
    return np.where(keep, b, 0.0), keep


def threshold_mlvar(fit, rule="and", alpha=0.05):
    """Significance-thresholded copy of a two-step fit.

    Temporal edges use their single p-value; contemporaneous and between
    edges combine their two p-values under ``rule``. Per-subject networks
    are left saturated (no subject-specific model selection is performed).
    """
    bt, _ = threshold_temporal(fit.temporal_fixed, fit.temporal_p, alpha)
    cn = threshold_rule(fit.contemporaneous_fixed, fit.contemporaneous_p,
                        fit.contemporaneous_p.T, rule, alpha)
    bn = threshold_rule(fit.between, fit.between_p, fit.between_p.T, rule, alpha)
    return replace(fit, temporal_fixed=bt, contemporaneous_fixed=cn, between=bn)


def _symmetrize_pair_pvalues(p):
    """For an (i, j) matrix of regression p-values, the two per-edge values
    are p[i, j] and p[j, i]; returns them as (p_a, p_b) with p_a <= p_b."""
    a = np.minimum(p, p.T)
    b = np.maximum(p, p.T)
    return a, b


class _Step1Result:
    def __init__(self, m, n_subjects):
        self.temporal_fixed = np.zeros((m, m))
        self.temporal_se = np.zeros((m, m))
        self.temporal_p = np.ones((m, m))
        self.temporal_subject = np.zeros((n_subjects, m, m))
        self.temporal_sd = np.zeros((m, m))
        self.b_mu = np.zeros((m, m))
        self.b_mu_p = np.ones((m, m))
        self.mu_resid_var = np.ones(m)
        self.residuals = None  # dict sid -> (rows, m)
        self.node_errors = {}


def mlvar_step1(panel, random="correlated", day_policy="break"):
    """Temporal and between-subjects stage of the two-step estimator.

    One univariate model per response: within-centered lagged variables as
    level-1 predictors, other variables' subject means as level-2
    predictors. Conditional residuals (per-subject demeaned, so step 2's
    intercept-free regressions are well specified) are collected for the
    contemporaneous stage.
    """
    if random not in RANDOM_SPECS:
        raise ValueError(f"random must be one of {RANDOM_SPECS}")
    m = panel.m
    n_subj = panel.n_subjects
    centered, means = within_center(panel)
    designs, _, skipped = panel_lagged_designs(centered, day_policy=day_policy)
    if not designs:
        raise InsufficientData("no subject has usable lagged rows")
    used_ids = [sid for sid in panel.ids if sid in designs]
    id_row = {sid: i for i, sid in enumerate(panel.ids)}

    # responses are the raw (uncentered) current values; rebuild them by
    # adding the subject mean back onto the centered design rows
    rows_x, rows_y, rows_g, rows_b = [], [], [], []
    for sid in used_ids:
        d = designs[sid]
        mu = means[id_row[sid]]
        rows_x.append(d.lagged)
        rows_y.append(d.current + mu[None, :])
        rows_g.append(np.repeat(id_row[sid], d.rows))
        rows_b.append(np.tile(mu, (d.rows, 1)))
    x_within = np.vstack(rows_x)
    y_all = np.vstack(rows_y)
    groups = np.concatenate(rows_g)
    between_all = np.vstack(rows_b)

    multi_subject = len(used_ids) >= 2
    out = _Step1Result(m, n_subj)
    resid_cols = np.empty((x_within.shape[0], m))
    for i in range(m):
        y = y_all[:, i]
        other = np.arange(m) != i
        xb = between_all[:, other] if multi_subject else None
        if random == "unique":
            fit = fit_lmm_reml(y, x_within, None, groups, random="unique")
        else:
            fit = fit_lmm_reml(y, x_within, xb, groups, random=random)
        out.temporal_fixed[i] = fit.fixed[fit.within_slice]
        out.temporal_se[i] = fit.fixed_se[fit.within_slice]
        out.temporal_p[i] = fit.fixed_p[fit.within_slice]
        if random in ("correlated", "orthogonal"):
            out.temporal_sd[i] = np.sqrt(np.diag(fit.random_cov)[1:])
            slopes = fit.blups[:, 1:]
            for sid in used_ids:
                g = fit.group_ids.index(id_row[sid])
                out.temporal_subject[id_row[sid], i] = out.temporal_fixed[i] + slopes[g]
            var_mu = fit.intercept_variance
            out.mu_resid_var[i] = max(var_mu, 1e-12) if var_mu else 1e-12
            if multi_subject:
                out.b_mu[i, other] = fit.fixed[fit.between_slice]
                out.b_mu_p[i, other] = fit.fixed_p[fit.between_slice]
        elif random == "unique":
            for sid in used_ids:
                g = fit.group_ids.index(id_row[sid])
                out.temporal_subject[id_row[sid], i] = (
                    fit.fixed[fit.within_slice] + fit.blups[g][fit.within_slice]
                )
        else:  # fixed
            out.temporal_subject[:, i] = out.temporal_fixed[i]
        resid = fit.residuals
        # demean per subject: the level-2 part of the model absorbs subject
        # means only approximately, and step 2 runs without an intercept
        for sid in used_ids:
            sel = groups == id_row[sid]
            resid_cols[sel, i] = resid[sel] - resid[sel].mean()
        if random == "unique" or (random == "fixed" and multi_subject):
            # level-2 coefficients from the cross-subject means regression
            b, p, rv = _means_nodewise(means, i)
            out.b_mu[i, other] = b
            out.b_mu_p[i, other] = p
            out.mu_resid_var[i] = rv

    out.residuals = {
        sid: resid_cols[groups == id_row[sid]] for sid in used_ids
    }
    out.subject_means = means
    out.used_ids = used_ids
    out.skipped = skipped
    out.groups = groups
    return out


def _means_nodewise(means, i):
    """OLS of subject mean i on the other subject means."""
    n, m = means.shape
    other = np.arange(m) != i
    x = np.hstack([np.ones((n, 1)), means[:, other]])
    if n <= x.shape[1]:
        raise InsufficientData("too few subjects for the means regression")
    fit = fit_lmm_reml(means[:, i], means[:, other], None, np.arange(n), random="fixed")
    rv = float(fit.residuals @ fit.residuals) / (n - x.shape[1])
    return fit.fixed[fit.within_slice], fit.fixed_p[fit.within_slice], max(rv, 1e-12)


def mlvar_step2(residuals, random="correlated"):
    """Contemporaneous stage: nodewise multilevel regressions among the
    step-1 residuals at the same occasion.

    Returns fixed coefficients/p-values/residual variances plus per-subject
    (BLUP-adjusted) coefficients and residual variances for the multilevel
    specs.
    """
    ids = list(residuals)
    m = next(iter(residuals.values())).shape[1]
    x_all = np.vstack([residuals[sid] for sid in ids])
    groups = np.concatenate(
        [np.repeat(i, residuals[sid].shape[0]) for i, sid in enumerate(ids)]
    )
    if x_all.shape[0] < m + 1:
        raise InsufficientData("too few residual rows for the contemporaneous stage")
    gamma = np.zeros((m, m))
    pvals = np.ones((m, m))
    resid_var = np.ones(m)
    gamma_sd = np.zeros((m, m))
    gamma_subject = np.zeros((len(ids), m, m))
    resid_var_subject = np.ones((len(ids), m))
    step2_resid = np.empty_like(x_all)
    for i in range(m):
        other = np.arange(m) != i
        y = x_all[:, i]
        xw = x_all[:, other]
        spec = random if random in ("correlated", "orthogonal") else (
            "unique" if random == "unique" else "fixed"
        )
        fit = fit_lmm_reml(y, xw, None, groups, random=spec,
                           include_intercept=False)
        gamma[i, other] = fit.fixed[fit.within_slice]
        pvals[i, other] = fit.fixed_p[fit.within_slice]
        resid_var[i] = fit.sigma2
        step2_resid[:, i] = fit.residuals
        if spec in ("correlated", "orthogonal"):
            gamma_sd[i, other] = np.sqrt(np.diag(fit.random_cov))
            for g, sid in enumerate(ids):
                gi = fit.group_ids.index(g)
                gamma_subject[g, i, other] = gamma[i, other] + fit.blups[gi]
        elif spec == "unique":
            for g, sid in enumerate(ids):
                gi = fit.group_ids.index(g)
                gamma_subject[g, i, other] = gamma[i, other] + fit.blups[gi]
        else:
            gamma_subject[:, i, other] = gamma[i, other]
    for g in range(len(ids)):
        rows = groups == g
        r = step2_resid[rows]
        resid_var_subject[g] = np.maximum(np.mean(r * r, axis=0), 1e-12)
    return gamma, pvals, resid_var, gamma_sd, gamma_subject, resid_var_subject


def _subject_contemporaneous(gamma_subject, resid_var_subject, labels):
    """Per-subject saturated networks with a positive-definiteness flag."""
    nets, valid = [], []
    m = gamma_subject.shape[1]
    for g in range(gamma_subject.shape[0]):
        r = _nodewise_partials(gamma_subject[g], resid_var_subject[g])
        clipped = np.clip(r, -1.0, 1.0)
        # partials R imply the standardized precision 2I - R; the subject's
        # covariance is positive definite exactly when that matrix is
        implied = 2.0 * np.eye(m) - clipped
        ok = bool(np.min(np.linalg.eigvalsh(implied)) > 0) and bool(
            np.max(np.abs(r)) <= 1.0 + 1e-12
        )
        included = ~np.eye(m, dtype=bool)
        nets.append(GgmNetwork(np.where(included, clipped, 0.0) + np.eye(m), included, labels))
        valid.append(ok)
    return tuple(nets), tuple(valid)


def mlvar_two_step(panel, random="correlated", day_policy="break"):
    """Run both stages and assemble the full multilevel fit (unthresholded;
    apply ``threshold_rule``/``threshold_temporal`` for sparse networks)."""
    step1 = mlvar_step1(panel, random=random, day_policy=day_policy)
    gamma, pvals, resid_var, gamma_sd, gamma_subject, rv_subject = mlvar_step2(
        step1.residuals, random=random
    )
    labels = panel.labels
    contemp_fixed = between_network(gamma, resid_var, labels)
    between = between_network(step1.b_mu, step1.mu_resid_var, labels)
    contemp_subject, contemp_valid = _subject_contemporaneous(
        gamma_subject, rv_subject, labels
    )
    # subject arrays are aligned with step1.used_ids
    n_used = len(step1.used_ids)
    id_row = {sid: i for i, sid in enumerate(panel.ids)}
    temporal_subject = np.array(
        [step1.temporal_subject[id_row[sid]] for sid in step1.used_ids]
    )
    subject_means = np.array([step1.subject_means[id_row[sid]] for sid in step1.used_ids])
    warn = tuple(f"subject {sid!r} skipped: no usable lagged rows" for sid in step1.skipped)
    return MlVarFit(
        labels=labels,
        subject_ids=tuple(step1.used_ids),
        temporal_fixed=step1.temporal_fixed,
        temporal_se=step1.temporal_se,
        temporal_p=step1.temporal_p,
        temporal_subject=temporal_subject.reshape(n_used, panel.m, panel.m),
        temporal_sd=step1.temporal_sd,
        contemporaneous_fixed=contemp_fixed,
        contemporaneous_p=pvals,
        contemporaneous_subject=contemp_subject,
        contemporaneous_valid=contemp_valid,
        contemporaneous_sd=gamma_sd,
        between=between,
        between_p=step1.b_mu_p,
        subject_means=subject_means,
        random=random,
        estimator="two-step",
        warnings_=warn,
    )


@dataclass(frozen=True)
class PooledLassoFit:
    """Pooled-and-individual penalized estimates in the same shape as the
    multilevel fit (no standard errors: model selection is by EBIC)."""

    labels: tuple
    subject_ids: tuple
    temporal_fixed: np.ndarray
    temporal_included: np.ndarray
    contemporaneous_fixed: GgmNetwork
    between: GgmNetwork
    subject_temporal: dict
    subject_contemporaneous: dict
    subject_errors: dict
    subject_means: np.ndarray
    warnings_: tuple = field(default=())


def pooled_individual_lasso(panel, gamma=0.25, day_policy="break",
                            n_beta=10, n_kappa=10, n_rho=100,
                            estimate_subjects="all"):
    """Penalized estimation of fixed, between and individual networks.

    (1) a joint sparse fit on the pooled within-centered rows gives the
    fixed temporal and contemporaneous networks; (2) a penalized network on
    the subject means gives the between network (flagged unavailable with
    fewer than 4 subjects); (3) each requested subject is refit separately
    for individual networks, failures reported per subject.
    ``estimate_subjects`` is "all", an int (first k), or a list of ids.
    """
    centered, means = within_center(panel)
    designs, _, skipped = panel_lagged_designs(centered, day_policy=day_policy)
    if not designs:
        raise InsufficientData("no subject has usable lagged rows")
    used_ids = [sid for sid in panel.ids if sid in designs]
    pooled = LaggedDesign(
        current=np.vstack([designs[sid].current for sid in used_ids]),
        lagged=np.vstack([designs[sid].lagged for sid in used_ids]),
    )
    fixed = gvar_ebic_search(pooled, gamma=gamma, n_beta=n_beta, n_kappa=n_kappa,
                             center=True)
    warn = tuple(f"subject {sid!r} skipped: no usable lagged rows" for sid in skipped)

    id_row = {sid: i for i, sid in enumerate(panel.ids)}
    means_used = np.array([means[id_row[sid]] for sid in used_ids])
    between = None
    if len(used_ids) >= 2:
        between = ebic_glasso(means_used, gamma=gamma, n_rho=n_rho, labels=panel.labels)
    else:
        warn += ("between network unavailable: only one subject",)

    if estimate_subjects == "all":
        targets = list(used_ids)
    elif isinstance(estimate_subjects, int):
        targets = list(used_ids)[:estimate_subjects]
    else:
        targets = [sid for sid in estimate_subjects if sid in designs]
    subject_temporal, subject_contemp, subject_errors = {}, {}, {}
    for sid in targets:
        try:
            fit = gvar_ebic_search(designs[sid], gamma=gamma, n_beta=n_beta,
                                   n_kappa=n_kappa, center=True)
        except GvarnetError as exc:
            subject_errors[sid] = exc
            continue
        subject_temporal[sid] = fit.beta
        subject_contemp[sid] = fit.contemporaneous

    contemp = GgmNetwork(fixed.contemporaneous.partials, fixed.contemporaneous.included,
                         panel.labels)
    return PooledLassoFit(
        labels=panel.labels,
        subject_ids=tuple(used_ids),
        temporal_fixed=fixed.beta,
        temporal_included=fixed.temporal_included,
        contemporaneous_fixed=contemp,
        between=between,
        subject_temporal=subject_temporal,
        subject_contemporaneous=subject_contemp,
        subject_errors=subject_errors,
        subject_means=means_used,
        warnings_=warn,
    )
