"""Data generators and scoring for the Monte-Carlo study.

Design: the contemporaneous truth is a chain graph; the temporal truth is
either a matching chain (condition "chain") or a skip chain connecting
every node to the second-next one (condition "skip", so no temporal edge
coincides with a contemporaneous edge); the between-subjects truth is a
random graph with as many edges as the chain. Half of each network's edges
are made negative before any per-subject rewiring; per-subject magnitudes
are drawn from N(0.35, 0.1^2). Estimates are scored by edge-set
sensitivity/specificity and by weight correlation, bias and MSE.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationFailure, NonStationary
from .ggm import GgmNetwork
from .gvar import TimeSeries, spectral_radius, stationary_covariance
from .mlvar import PanelData

NETWORKS = ("temporal", "contemporaneous", "between")
LEVELS = ("fixed", "subject")
METRICS = ("sensitivity", "specificity", "correlation", "bias", "mse")


@dataclass(frozen=True)
class EdgeGraph:
    """Edge list over ``n_nodes``; undirected edges stored with i < j."""

    n_nodes: int
    directed: bool
    edges: tuple

    def __post_init__(self):
        seen = set()
        for (a, b) in self.edges:
            if not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes) or a == b:
                raise ValueError(f"invalid edge ({a}, {b})")
            if not self.directed and a > b:
                raise ValueError("undirected edges must be stored with i < j")
            key = (a, b)
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    @property
    def edge_count(self):
        return len(self.edges)


def gen_chain_graph(m):
    """Undirected path 1 - 2 - ... - m."""
    if m < 2:
        raise ValueError("chain graph needs at least 2 nodes")
    return EdgeGraph(m, directed=False, edges=tuple((i, i + 1) for i in range(m - 1)))


def gen_skip_chain(m):
    """Directed edges i -> i+2 only, so none lines up with a chain edge."""
    if m < 3:
        raise ValueError("skip chain needs at least 3 nodes")
    return EdgeGraph(m, directed=True, edges=tuple((i, i + 2) for i in range(m - 2)))


def chain_to_directed(graph):
    """Orient an undirected chain forward (i -> i+1) for temporal use."""
    return EdgeGraph(graph.n_nodes, directed=True, edges=graph.edges)


def all_slots(m, directed):
    if directed:
        return [(a, b) for a in range(m) for b in range(m) if a != b]
    return [(a, b) for a in range(m) for b in range(a + 1, m)]


def gen_random_graph(m, edge_count, rng):
    """Uniformly sampled undirected graph with exactly ``edge_count`` edges."""
    slots = all_slots(m, directed=False)
    if edge_count > len(slots):
        raise ValueError(f"cannot place {edge_count} edges among {len(slots)} slots")
    idx = rng.choice(len(slots), size=edge_count, replace=False)
    return EdgeGraph(m, directed=False, edges=tuple(sorted(slots[i] for i in idx)))


@dataclass(frozen=True)
class WeightedGraph:
    graph: EdgeGraph
    weights: tuple  # signed, aligned with graph.edges
    negative: tuple  # sign flags, aligned with graph.edges


def negative_flags(edge_count, rng):
    """Exactly floor(E/2) randomly chosen edges flagged negative."""
    flags = np.zeros(edge_count, dtype=bool)
    if edge_count:
        neg = rng.choice(edge_count, size=edge_count // 2, replace=False)
        flags[neg] = True
    return tuple(bool(f) for f in flags)


def draw_magnitudes(edge_count, rng, mean=0.35, sd=0.1):
    return np.abs(rng.normal(mean, sd, size=edge_count))


def assign_weights(graph, rng, mean=0.35, sd=0.1):
    """Signed weights for one graph: half the edges negative (exactly
    floor(E/2)), magnitudes from N(mean, sd^2)."""
    if graph.edge_count == 0:
        raise ValueError("cannot assign weights to an empty graph")
    flags = negative_flags(graph.edge_count, rng)
    mags = draw_magnitudes(graph.edge_count, rng, mean, sd)
    weights = tuple(-m if f else m for m, f in zip(mags, flags))
    return WeightedGraph(graph, weights, flags)


def rewire(graph, prob, rng):
    """Move each edge, independently with probability ``prob``, to a
    uniformly chosen currently-empty slot; edge count is preserved."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("rewire probability must lie in [0, 1]")
    edges = list(graph.edges)
    occupied = set(edges)
    slots = all_slots(graph.n_nodes, graph.directed)
    for i in range(len(edges)):
        if rng.random() >= prob:
            continue
        free = [s for s in slots if s not in occupied]
        if not free:
            continue
        new = free[rng.integers(len(free))]
        occupied.discard(edges[i])
        occupied.add(new)
        edges[i] = new
    if not graph.directed:
        edges = sorted(tuple(sorted(e)) for e in edges)
    return EdgeGraph(graph.n_nodes, graph.directed, tuple(edges))


@dataclass(frozen=True)
class SimStudyConfig:
    """One cell of the study design."""

    nodes: int = 8
    subjects: int = 100
    occasions: int = 100
    temporal_condition: str = "chain"
    rewire_prob: float = 0.0
    weight_mean: float = 0.35
    weight_sd: float = 0.1
    negative_fraction: float = 0.5
    self_loops: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.nodes < 3 or self.subjects < 1 or self.occasions < 1:
            raise ValueError("counts must be positive (and nodes >= 3)")
        if self.temporal_condition not in ("chain", "skip"):
            raise ValueError("temporal_condition must be 'chain' or 'skip'")
        if not 0.0 <= self.rewire_prob <= 1.0:
            raise ValueError("rewire_prob must lie in [0, 1]")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ValueError("negative_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TrueModel:
    """Generating model for one replication."""

    config: SimStudyConfig
    labels: tuple
    beta: np.ndarray  # (n, m, m) per subject
    temporal_mask: np.ndarray  # (n, m, m) bool
    contemp_partials: np.ndarray  # (n, m, m)
    contemp_precision: np.ndarray  # (n, m, m)
    contemp_mask: np.ndarray  # (n, m, m) bool
    between_precision: np.ndarray  # (m, m), unit diagonal
    between_partials: np.ndarray
    between_mask: np.ndarray
    mu: np.ndarray  # (n, m)
    fixed_beta: np.ndarray = field(init=False)
    fixed_contemp: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "fixed_beta", self.beta.mean(axis=0))
        object.__setattr__(self, "fixed_contemp", self.contemp_partials.mean(axis=0))

    @property
    def n_subjects(self):
        return self.beta.shape[0]

    @property
    def m(self):
        return self.beta.shape[1]

    @property
    def fixed_temporal_mask(self):
        return self.fixed_beta != 0.0

    @property
    def fixed_contemp_mask(self):
        mask = self.fixed_contemp != 0.0
        np.fill_diagonal(mask, False)
        return mask

    def between_network(self):
        return GgmNetwork(self.between_partials, self.between_mask, self.labels)


def _temporal_matrix(wg, m):
    b = np.zeros((m, m))
    for (a, c), w in zip(wg.graph.edges, wg.weights):
        b[c, a] = w  # edge a -> c predicts node c from node a
    return b


def _contemp_matrices(wg, m):
    k = np.eye(m)
    for (a, c), w in zip(wg.graph.edges, wg.weights):
        k[a, c] = k[c, a] = -w  # partial correlation of the edge equals w
    return k


def _is_pd(a, floor=1e-6):
    return bool(np.min(np.linalg.eigvalsh(a)) > floor)


def _stable_temporal(graph, flags, rng, cfg, max_redraws=100):
    for _ in range(max_redraws):
        mags = draw_magnitudes(graph.edge_count, rng, cfg.weight_mean, cfg.weight_sd)
        weights = tuple(-m if f else m for m, f in zip(mags, flags))
        b = _temporal_matrix(WeightedGraph(graph, weights, flags), cfg.nodes)
        if spectral_radius(b) < 0.95:
            return b
    # preserve the structure, scale into the stable region
    b *= 0.95 / spectral_radius(b)
    return b


def _pd_contemp(graph, flags, rng, cfg, max_redraws=100):
    for _ in range(max_redraws):
        mags = draw_magnitudes(graph.edge_count, rng, cfg.weight_mean, cfg.weight_sd)
        weights = tuple(-m if f else m for m, f in zip(mags, flags))
        k = _contemp_matrices(WeightedGraph(graph, weights, flags), cfg.nodes)
        if _is_pd(k):
            return k
    # scale off-diagonals toward zero until positive definite
    off = k - np.diag(np.diag(k))
    lam = np.min(np.linalg.eigvalsh(off))
    k = np.eye(cfg.nodes) + off * (0.95 / abs(lam))
    if not _is_pd(k, floor=0.0):
        raise GenerationFailure("could not build a positive definite contemporaneous model")
    return k


def build_true_model(config):
    """Draw one full generating model for a study cell.

    Masks are shared across subjects when ``rewire_prob`` is 0 (weights
    still differ per subject); otherwise each subject's temporal and
    contemporaneous graphs are independently rewired. Sign flags are drawn
    once on the base graphs and travel with the edges through rewiring.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    m = cfg.nodes
    labels = tuple(f"V{i + 1}" for i in range(m))

    contemp_base = gen_chain_graph(m)
    if cfg.temporal_condition == "chain":
        temporal_base = chain_to_directed(contemp_base)
    else:
        temporal_base = gen_skip_chain(m)
    if cfg.self_loops:
        temporal_base = EdgeGraph(
            m, True, temporal_base.edges + tuple((i, i) for i in range(m))
        )

    temporal_flags = negative_flags(temporal_base.edge_count, rng)
    contemp_flags = negative_flags(contemp_base.edge_count, rng)

    # between network: random graph, same edge count as the chain, drawn once
    between_graph = gen_random_graph(m, contemp_base.edge_count, rng)
    between_w = assign_weights(between_graph, rng, cfg.weight_mean, cfg.weight_sd)
    k_raw = np.zeros((m, m))
    for (a, c), w in zip(between_graph.edges, between_w.weights):
        k_raw[a, c] = k_raw[c, a] = -w
    np.fill_diagonal(k_raw, np.sum(np.abs(k_raw), axis=1) + 0.1)
    d = 1.0 / np.sqrt(np.diag(k_raw))
    k_between = k_raw * np.outer(d, d)
    between_partials = -k_between + 2.0 * np.eye(m)
    between_mask_arr = np.zeros((m, m), dtype=bool)
    for (a, c) in between_graph.edges:
        between_mask_arr[a, c] = between_mask_arr[c, a] = True
    omega = np.linalg.inv(k_between)
    omega = (omega + omega.T) / 2.0

    n = cfg.subjects
    beta = np.empty((n, m, m))
    temporal_mask = np.zeros((n, m, m), dtype=bool)
    contemp_partials = np.empty((n, m, m))
    contemp_precision = np.empty((n, m, m))
    contemp_mask = np.zeros((n, m, m), dtype=bool)
    for p in range(n):
        tg = rewire(temporal_base, cfg.rewire_prob, rng) if cfg.rewire_prob else temporal_base
        cg = rewire(contemp_base, cfg.rewire_prob, rng) if cfg.rewire_prob else contemp_base
        beta[p] = _stable_temporal(tg, temporal_flags, rng, cfg)
        k_p = _pd_contemp(cg, contemp_flags, rng, cfg)
        contemp_precision[p] = k_p
        scale = 1.0 / np.sqrt(np.diag(k_p))
        r = -k_p * np.outer(scale, scale)
        np.fill_diagonal(r, 1.0)
        contemp_partials[p] = r
        temporal_mask[p] = beta[p] != 0.0
        cm = r != 0.0
        np.fill_diagonal(cm, False)
        contemp_mask[p] = cm

    mu = rng.multivariate_normal(np.zeros(m), omega, size=n)
    model = TrueModel(
        config=cfg, labels=labels, beta=beta, temporal_mask=temporal_mask,
        contemp_partials=contemp_partials, contemp_precision=contemp_precision,
        contemp_mask=contemp_mask, between_precision=k_between,
        between_partials=between_partials, between_mask=between_mask_arr, mu=mu,
    )
    _check_generated(model)
    return model


def _check_generated(model):
    for p in range(model.n_subjects):
        theta = np.linalg.inv(model.contemp_precision[p])
        theta = (theta + theta.T) / 2.0
        sigma = stationary_covariance(model.beta[p], theta)  # raises if unstable
        resid = np.max(np.abs(
            sigma.values - model.beta[p] @ sigma.values @ model.beta[p].T - theta
        ))
        if resid > 1e-10:
            raise GenerationFailure(f"stationarity identity violated ({resid:.2e})")


def simulate_panel(model, occasions, rng):
    """Simulate every subject from its own dynamics, started from the
    stationary distribution, with subject means drawn from the between
    model at build time."""
    subjects = {}
    for p in range(model.n_subjects):
        theta = np.linalg.inv(model.contemp_precision[p])
        theta = (theta + theta.T) / 2.0
        b = model.beta[p]
        sigma = stationary_covariance(b, theta).values
        chol_s = np.linalg.cholesky(sigma)
        chol_t = np.linalg.cholesky(theta)
        y = np.empty((occasions, model.m))
        y[0] = model.mu[p] + chol_s @ rng.standard_normal(model.m)
        for t in range(1, occasions):
            y[t] = model.mu[p] + b @ (y[t - 1] - model.mu[p]) + chol_t @ rng.standard_normal(model.m)
        subjects[f"s{p:04d}"] = TimeSeries(y)
    return PanelData(subjects, model.labels)


@dataclass(frozen=True)
class Metrics:
    sensitivity: float
    specificity: float
    correlation: float
    bias: float
    mse: float

    def as_dict(self):
        return {k: getattr(self, k) for k in METRICS}


def _score_cell(true_w, true_mask, est_w, est_mask, cells):
    tw = true_w[cells]
    ew = est_w[cells]
    tm = true_mask[cells]
    em = est_mask[cells]
    tp = int(np.sum(tm & em))
    fn = int(np.sum(tm & ~em))
    tn = int(np.sum(~tm & ~em))
    fp = int(np.sum(~tm & em))
    sens = tp / (tp + fn) if tp + fn else np.nan
    spec = tn / (tn + fp) if tn + fp else np.nan
    if np.std(tw) > 0 and np.std(ew) > 0:
        corr = float(np.corrcoef(tw, ew)[0, 1])
    else:
        corr = np.nan
    bias = float(np.mean(np.abs(tw - ew)))
    mse = float(np.mean((tw - ew) ** 2))
    return Metrics(sens, spec, corr, bias, mse)


def _temporal_cells(m):
    return np.ones((m, m), dtype=bool)


def _upper_cells(m):
    return np.triu(np.ones((m, m), dtype=bool), k=1)


@dataclass(frozen=True)
class SimScores:
    """Metrics per (network type, level); between has no subject level."""

    scores: dict

    def get(self, network, level):
        return self.scores.get((network, level))

    def rows(self):
        for (network, level), metrics in sorted(self.scores.items()):
            for name, value in metrics.as_dict().items():
                yield network, level, name, value


def score(true_model, estimate, subject_ids=None):
    """Score an estimated fit (two-step or pooled shapes) against truth.

    ``estimate`` needs ``temporal_fixed``, a contemporaneous GgmNetwork, an
    optional between GgmNetwork, and (optionally) per-subject estimates;
    subject-level metrics average over the estimated subjects.
    """
    m = true_model.m
    tcells = _temporal_cells(m)
    ucells = _upper_cells(m)
    out = {}
    tb, tmask = _estimate_temporal(estimate)
    out[("temporal", "fixed")] = _score_cell(
        true_model.fixed_beta, true_model.fixed_temporal_mask, tb, tmask, tcells
    )
    cnet = estimate.contemporaneous_fixed
    out[("contemporaneous", "fixed")] = _score_cell(
        true_model.fixed_contemp, true_model.fixed_contemp_mask,
        cnet.partials, cnet.included, ucells,
    )
    if getattr(estimate, "between", None) is not None:
        out[("between", "fixed")] = _score_cell(
            true_model.between_partials, true_model.between_mask,
            estimate.between.partials, estimate.between.included, ucells,
        )
    subj = _subject_estimates(true_model, estimate, subject_ids)
    if subj:
        t_list, c_list = [], []
        for p, bt, bmask, cpart, cmask in subj:
            t_list.append(_score_cell(
                true_model.beta[p], true_model.temporal_mask[p], bt, bmask, tcells
            ))
            c_list.append(_score_cell(
                true_model.contemp_partials[p], true_model.contemp_mask[p],
                cpart, cmask, ucells,
            ))
        out[("temporal", "subject")] = _average_metrics(t_list)
        out[("contemporaneous", "subject")] = _average_metrics(c_list)
    return SimScores(out)


def _average_metrics(items):
    vals = {}
    for name in METRICS:
        arr = np.array([getattr(it, name) for it in items], dtype=np.float64)
        good = arr[np.isfinite(arr)]
        vals[name] = float(good.mean()) if good.size else np.nan
    return Metrics(**vals)


def _estimate_temporal(estimate):
    b = np.asarray(estimate.temporal_fixed, dtype=np.float64)
    mask = getattr(estimate, "temporal_included", None)
    if mask is None:
        mask = b != 0.0
    return b, np.asarray(mask, dtype=bool)


def replication_seed(base_seed, replication):
    """Per-replication stream seed: base XOR replication index."""
    return int(base_seed) ^ int(replication)


def run_study(config, replications, estimators=("two-step",), random="orthogonal",
              rule="and", alpha=0.05, gamma=0.25, subjects_scored=1,
              progress=None):
    """Replicate one design cell and score each estimator against truth.

    Every replication reseeds deterministically (base seed XOR replication
    index), builds a fresh generating model, simulates a panel and runs the
    requested estimators ("two-step" significance-thresholded under
    ``rule``/``alpha``; "pooled-lasso" EBIC-selected with ``gamma``,
    estimating ``subjects_scored`` individual networks). Returns a list of
    (replication, estimator, SimScores).
    """
    from .mlvar import mlvar_two_step, pooled_individual_lasso, threshold_mlvar

    results = []
    for rep in range(replications):
        seed = replication_seed(config.seed, rep)
        cfg = replace(config, seed=seed)
        model = build_true_model(cfg)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5151]))
        panel = simulate_panel(model, cfg.occasions, rng)
        for estimator in estimators:
            if estimator == "two-step":
                fit = threshold_mlvar(mlvar_two_step(panel, random=random),
                                      rule=rule, alpha=alpha)
                sc = score(model, fit)
            elif estimator == "pooled-lasso":
                fit = pooled_individual_lasso(panel, gamma=gamma,
                                              estimate_subjects=subjects_scored)
                sc = score(model, fit)
            else:
                raise ValueError(f"unknown estimator {estimator!r}")
            results.append((rep, estimator, sc))
        if progress is not None:
            progress(rep)
    return results


def _subject_estimates(true_model, estimate, subject_ids):
    ids = list(getattr(estimate, "subject_ids", ()))
    if not ids:
        return []
    index = {sid: p for p, sid in enumerate(ids)}
    wanted = ids if subject_ids is None else [s for s in subject_ids if s in index]
    rows = []
    temporal_subject = getattr(estimate, "temporal_subject", None)
    subject_temporal = getattr(estimate, "subject_temporal", None)
    contemp_subject = getattr(estimate, "contemporaneous_subject", None)
    subject_contemp = getattr(estimate, "subject_contemporaneous", None)
    for sid in wanted:
        p = index[sid]
        if temporal_subject is not None:  # two-step: dense array, saturated
            bt = temporal_subject[p]
            bmask = np.ones_like(bt, dtype=bool)
            cnet = contemp_subject[p]
            rows.append((p, bt, bmask, cnet.partials, cnet.included))
        elif subject_temporal is not None and sid in subject_temporal:
            bt = subject_temporal[sid]
            cnet = subject_contemp[sid]
            rows.append((p, bt, bt != 0.0, cnet.partials, cnet.included))
    return rows
