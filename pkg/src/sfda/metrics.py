"""Rank-based multi-label metrics, top-1 accuracy and confidence summaries.

Ranks are 1-based. Equal scores are ordered by ascending class index when
ranking within an example (``sample_map``) and by ascending example index when
ranking within a class (``class_cmap``).
"""
from __future__ import annotations

import json

import numpy as np

from .errors import DataError, ShapeError


class UndefinedMetricError(DataError):
    """No example (or class) qualifies for the requested average."""


def _check(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) > 0
    if s.ndim != 2 or s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal 2-D shapes")
    return s, y


def _average_precision(scores, positives):
    """AP of one ranking: mean over positives of precision at their rank.

    ``scores`` and ``positives`` are 2-D; each row is an independent ranking.
    """
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = np.take_along_axis(positives, order, axis=1)
    ranks = np.arange(1, scores.shape[1] + 1)
    precision = np.cumsum(hits, axis=1) / ranks
    n_pos = hits.sum(axis=1)
    return (precision * hits).sum(axis=1) / np.maximum(n_pos, 1), n_pos


def sample_map(scores, labels):
    """Sample-wise mAP: classes ranked within each example, averaged over examples.

    Examples without any positive label are skipped.
    """
    s, y = _check(scores, labels)
    ap, n_pos = _average_precision(s, y)
    keep = n_pos > 0
    if not keep.any():
        raise UndefinedMetricError("mAP is undefined: no example has a positive label")
    return float(ap[keep].mean())


def per_class_ap(scores, labels, min_positives=5):
    """AP per class (examples ranked within each class) and the qualifying mask."""
    s, y = _check(scores, labels)
    ap, n_pos = _average_precision(s.T, y.T)
    return ap, n_pos >= max(min_positives, 1)


def class_cmap(scores, labels, min_positives=5):
    """Class-wise mAP over classes with at least ``min_positives`` positives."""
    ap, ok = per_class_ap(scores, labels, min_positives)
    if not ok.any():
        raise UndefinedMetricError(f"cmAP is undefined: no class has >= {min_positives} positives")
    return float(ap[ok].mean())


def top1(scores, labels):
    """Fraction of rows whose arg-max score hits the labelled class."""
    s, y = _check(scores, labels)
    if s.shape[0] == 0:
        raise UndefinedMetricError("top-1 accuracy of an empty batch")
    if not np.all(y.sum(axis=1) == 1):
        raise DataError("top-1 needs exactly one positive label per row")
    pred = s.argmax(axis=1)
    return float((pred == y.argmax(axis=1)).mean())


def confidence_profile(probs, labels=None, quantiles=(0.1, 0.25, 0.5, 0.75, 0.9)):
    """Per-class summaries of assigned probability plus mean max confidence.

    With ``labels``, the per-class summaries only cover examples where the
    class is present (the probability the model gives to true positives).
    """
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("probabilities must lie in [0, 1]")
    mask = np.ones_like(p, dtype=bool) if labels is None else (np.asarray(labels) > 0)
    per_class = []
    for c in range(p.shape[1]):
        vals = p[mask[:, c], c]
        if vals.size == 0:
            per_class.append({"class": c, "count": 0, "mean": float("nan"),
                              "quantiles": [float("nan")] * len(quantiles)})
            continue
        per_class.append({"class": c, "count": int(vals.size), "mean": float(vals.mean()),
                          "quantiles": [float(q) for q in np.quantile(vals, quantiles)]})
    return {
        "mean_max_conf": float(p.max(axis=1).mean()) if p.size else float("nan"),
        "mean_prob": float(p.mean()) if p.size else float("nan"),
        "per_class": per_class,
    }


def evaluate(probs, labels, task, min_positives=5):
    """Metric report: mAP, cmAP, top-1 (single-label only) and confidence.

    Metrics that are undefined on this batch come back as NaN.
    """
    def attempt(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetricError:
            return float("nan")

    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels)
    report = {
        "map": attempt(sample_map, p, y),
        "cmap": attempt(class_cmap, p, y, min_positives),
        "mean_max_conf": float(p.max(axis=1).mean()) if len(p) else float("nan"),
        "mean_prob": float(p.mean()) if len(p) else float("nan"),
        "n_examples": int(p.shape[0]),
        "n_qualifying_classes": int(per_class_ap(p, y, min_positives)[1].sum()) if len(p) else 0,
    }
    if task == "single_label":
        report["top1"] = attempt(top1, p, y)
    return report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
