"""Serialization: JSON documents, DOT graphs, CSV edge lists and panels.

All writers are deterministic: fixed key order, fixed node order, floats
at shortest round-trip precision in JSON/CSV and 4 decimals in DOT, so
identical inputs produce byte-identical files.
"""

import csv
import json

import numpy as np

from .gvar import GvarModel, TimeSeries
from .mlvar import MlVarFit, PanelData, PooledLassoFit


def _mat(a):
    return np.asarray(a).tolist()


def network_to_dict(net):
    return {
        "labels": list(net.labels),
        "partials": _mat(net.partials),
        "included": _mat(np.asarray(net.included, dtype=bool)),
    }


def gvar_model_to_dict(model, labels=None):
    labels = list(labels) if labels is not None else list(model.contemporaneous.labels)
    return {
        "labels": labels,
        "beta": _mat(model.beta),
        "temporal_included": _mat(np.asarray(model.temporal_included, dtype=bool)),
        "theta_precision": _mat(model.theta_precision.values),
        "contemporaneous": network_to_dict(model.contemporaneous),
        "means": _mat(model.means),
    }


def mlvar_fit_to_dict(fit):
    if isinstance(fit, MlVarFit):
        doc = {
            "estimator": "mlvar-two-step",
            "labels": list(fit.labels),
            "subject_ids": list(fit.subject_ids),
            "temporal": {
                "fixed": _mat(fit.temporal_fixed),
                "se": _mat(fit.temporal_se),
                "p": _mat(fit.temporal_p),
                "random_sd": _mat(fit.temporal_sd),
                "subject": _mat(fit.temporal_subject),
            },
            "contemporaneous": {
                "fixed": network_to_dict(fit.contemporaneous_fixed),
                "p": _mat(fit.contemporaneous_p),
                "random_sd": _mat(fit.contemporaneous_sd),
                "subject": [network_to_dict(n) for n in fit.contemporaneous_subject],
                "subject_valid": list(fit.contemporaneous_valid),
            },
            "between": {
                "fixed": network_to_dict(fit.between),
                "p": _mat(fit.between_p),
            },
            "subject_means": _mat(fit.subject_means),
            "random": fit.random,
            "warnings": list(fit.warnings_),
        }
        return doc
    if isinstance(fit, PooledLassoFit):
        return {
            "estimator": "mlvar-pooled-lasso",
            "labels": list(fit.labels),
            "subject_ids": list(fit.subject_ids),
            "temporal": {
                "fixed": _mat(fit.temporal_fixed),
                "included": _mat(np.asarray(fit.temporal_included, dtype=bool)),
                "subject": {sid: _mat(b) for sid, b in sorted(fit.subject_temporal.items())},
            },
            "contemporaneous": {
                "fixed": network_to_dict(fit.contemporaneous_fixed),
                "subject": {
                    sid: network_to_dict(n)
                    for sid, n in sorted(fit.subject_contemporaneous.items())
                },
            },
            "between": None if fit.between is None else {"fixed": network_to_dict(fit.between)},
            "subject_errors": {sid: str(e) for sid, e in sorted(fit.subject_errors.items())},
            "subject_means": _mat(fit.subject_means),
            "warnings": list(fit.warnings_),
        }
    raise TypeError(f"cannot serialize {type(fit).__name__}")


def write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dot_quote(s):
    return '"' + str(s).replace('"', r"\"") + '"'


def export_dot(weights, labels, path, kind="undirected", mask=None):
    """Write a weighted graph in DOT form.

    ``kind='undirected'`` emits each i < j pair once with ``--`` edges;
    ``'directed'`` emits all nonzero (including self-loop) entries of the
    (response, predictor) matrix as ``predictor -> response``. Weights are
    fixed at 4 decimals and each edge carries a sign attribute, so output
    is byte-stable.
    """
    if kind not in ("directed", "undirected"):
        raise ValueError("kind must be 'directed' or 'undirected'")
    w = np.asarray(weights, dtype=np.float64)
    m = w.shape[0]
    if mask is None:
        mask = w != 0.0
        if kind == "undirected":
            mask = mask & ~np.eye(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    lines = []
    graph_kw = "digraph" if kind == "directed" else "graph"
    arrow = "->" if kind == "directed" else "--"
    lines.append(f"{graph_kw} network {{")
    for lab in labels:
        lines.append(f"  {_dot_quote(lab)};")
    if kind == "undirected":
        pairs = [(i, j) for i in range(m) for j in range(i + 1, m) if mask[i, j]]
        for i, j in pairs:
            sign = "-" if w[i, j] < 0 else "+"
            lines.append(
                f"  {_dot_quote(labels[i])} {arrow} {_dot_quote(labels[j])} "
                f'[weight={w[i, j]:.4f}, sign="{sign}"];'
            )
    else:
        # w[i, j]: predictor j at t-1 -> response i at t
        pairs = [(i, j) for i in range(m) for j in range(m) if mask[i, j]]
        for i, j in pairs:
            sign = "-" if w[i, j] < 0 else "+"
            lines.append(
                f"  {_dot_quote(labels[j])} {arrow} {_dot_quote(labels[i])} "
                f'[weight={w[i, j]:.4f}, sign="{sign}"];'
            )
    lines.append("}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def edge_list_rows(fit):
    """Edge-list rows (from, to, weight, p1, p2, network_type) for every
    nonzero edge in a multilevel fit's fixed networks."""
    rows = []
    labels = fit.labels
    b = np.asarray(fit.temporal_fixed)
    tp = getattr(fit, "temporal_p", None)
    m = len(labels)
    for i in range(m):
        for j in range(m):
            if b[i, j] != 0.0:
                p1 = "" if tp is None else repr(float(tp[i, j]))
                rows.append((labels[j], labels[i], repr(float(b[i, j])), p1, "", "temporal"))
    for name, net, p in (
        ("contemporaneous", fit.contemporaneous_fixed,
         getattr(fit, "contemporaneous_p", None)),
        ("between", getattr(fit, "between", None), getattr(fit, "between_p", None)),
    ):
        if net is None:
            continue
        for i in range(m):
            for j in range(i + 1, m):
                if net.included[i, j]:
                    p1 = "" if p is None else repr(float(p[i, j]))
                    p2 = "" if p is None else repr(float(p[j, i]))
                    rows.append((labels[i], labels[j],
                                 repr(float(net.partials[i, j])), p1, p2, name))
    return rows


def write_edge_csv(fit, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "weight", "p1", "p2", "network_type"])
        writer.writerows(edge_list_rows(fit))


def panel_to_csv(panel, path, id_column="id", day_column="day"):
    """Long-format CSV of a panel at full (round-trip) float precision."""
    has_day = any(s.day_index is not None for s in panel.subjects.values())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = [id_column] + ([day_column] if has_day else []) + list(panel.labels)
        writer.writerow(header)
        for sid, series in panel.subjects.items():
            for t in range(series.t):
                row = [sid]
                if has_day:
                    row.append("" if series.day_index is None else series.day_index[t])
                for j in range(series.m):
                    row.append("" if series.missing[t, j] else repr(float(series.values[t, j])))
                writer.writerow(row)


def write_scores_csv(results, config, path):
    """Tidy study results: one row per (replication, estimator, condition,
    network type, level, metric)."""
    condition = (
        f"nodes={config.nodes};subjects={config.subjects};occasions={config.occasions};"
        f"temporal={config.temporal_condition};rewire={config.rewire_prob}"
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replication", "estimator", "condition", "network_type",
                         "level", "metric", "value"])
        for rep, estimator, scores in results:
            for network, level, metric, value in scores.rows():
                writer.writerow([rep, estimator, condition, network, level, metric,
                                 "" if value != value else repr(float(value))])


def true_model_to_dict(model):
    return {
        "config": {
            "nodes": model.config.nodes,
            "subjects": model.config.subjects,
            "occasions": model.config.occasions,
            "temporal_condition": model.config.temporal_condition,
            "rewire_prob": model.config.rewire_prob,
            "weight_mean": model.config.weight_mean,
            "weight_sd": model.config.weight_sd,
            "negative_fraction": model.config.negative_fraction,
            "self_loops": model.config.self_loops,
            "seed": model.config.seed,
        },
        "labels": list(model.labels),
        "beta": _mat(model.beta),
        "contemporaneous_partials": _mat(model.contemp_partials),
        "contemporaneous_precision": _mat(model.contemp_precision),
        "between_precision": _mat(model.between_precision),
        "between_partials": _mat(model.between_partials),
        "between_mask": _mat(model.between_mask),
        "mu": _mat(model.mu),
        "fixed_beta": _mat(model.fixed_beta),
        "fixed_contemporaneous": _mat(model.fixed_contemp),
    }
