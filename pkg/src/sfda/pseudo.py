"""Teacher-side pseudo-label computation.

The soft update combines a sharpened prediction with a graph term,

    y_i  proportional to  p_i ** (1/alpha) * exp((lam/alpha) * sum_j w_ij p_j),

evaluated in log space. Multi-label inputs hold positive-class
probabilities; each class is handled as its own two-way problem
``[p, 1 - p]``, so the normalisation collapses to a logistic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import laplacian_smooth
from .nn import TASKS

PROB_FLOOR = 1e-12
UPDATE_FREQUENCIES = ("every_iteration", "every_epoch")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1.0
    lam: float = 1.0
    ccp_iters: int = 1
    ccp_tol: float = 1e-9
    update_frequency: str = "every_epoch"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.ccp_iters < 1:
            raise ConfigError("ccp_iters must be at least 1")
        if not self.ccp_tol > 0:
            raise ConfigError("ccp_tol must be positive")
        if self.update_frequency not in UPDATE_FREQUENCIES:
            raise ConfigError(f"unknown update frequency {self.update_frequency!r}")


def _check(probs, task, graph=None):
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise ShapeError(f"expected an (N, C) matrix, got shape {p.shape}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if graph is not None and graph.n != p.shape[0]:
        raise ShapeError(f"graph has {graph.n} nodes but probs has {p.shape[0]} rows")
    return p


def _safe_log(x):
    return np.log(np.maximum(x, PROB_FLOOR))


def _update(logp, log1mp, smooth_pos, smooth_neg, alpha, lam, task):
    """One closed-form update given the (already smoothed) neighbour terms."""
    if task == "single_label":
        s = logp / alpha
        if lam:
            s = s + (lam / alpha) * smooth_pos
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)
    z = (logp - log1mp) / alpha
    if lam:
        z = z + (lam / alpha) * (smooth_pos - smooth_neg)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _smooth(graph, y, task, lam):
    if not lam or graph is None:
        return None, None
    pos = laplacian_smooth(graph, y)
    neg = laplacian_smooth(graph, 1.0 - y) if task == "multi_label" else None
    return pos, neg


def teacher_step(probs, graph, cfg, task="single_label"):
    """Closed-form pseudo-labels from model probabilities and the affinity graph.

    ``graph`` may be ``None`` when ``cfg.lam == 0``.
    """
    p = _check(probs, task, graph if cfg.lam else None)
    if cfg.lam and graph is None:
        raise ConfigError("a graph is required when lambda > 0")
    logp, log1mp = _safe_log(p), (_safe_log(1.0 - p) if task == "multi_label" else None)
    sp_, sn_ = _smooth(graph, p, task, cfg.lam)
    return _update(logp, log1mp, sp_, sn_, cfg.alpha, cfg.lam, task)


def teacher_rows(rows, probs_all, graph, cfg, task="single_label"):
    """Pseudo-labels for a subset of samples, with neighbour terms from ``probs_all``."""
    rows = np.asarray(rows)
    p_all = _check(probs_all, task, graph if cfg.lam else None)
    p = p_all[rows]
    logp, log1mp = _safe_log(p), (_safe_log(1.0 - p) if task == "multi_label" else None)
    sp_ = sn_ = None
    if cfg.lam:
        w = graph.weights[rows]
        sp_ = np.asarray(w @ p_all) + graph.self_weight * p
        if task == "multi_label":
            sn_ = np.asarray(w @ (1.0 - p_all)) + graph.self_weight * (1.0 - p)
    return _update(logp, log1mp, sp_, sn_, cfg.alpha, cfg.lam, task)


def ccp_solve(probs, graph, cfg, task="single_label", return_history=False):
    """Unrolled fixed-point iterations, starting from ``y = probs``.

    Each iteration re-linearises the graph term at the previous labels. Stops
    after ``cfg.ccp_iters`` iterations or once no entry moves by more than
    ``cfg.ccp_tol``. The first iteration equals :func:`teacher_step`.
    """
    p = _check(probs, task, graph if cfg.lam else None)
    logp, log1mp = _safe_log(p), (_safe_log(1.0 - p) if task == "multi_label" else None)
    y = p
    history = [p]
    for _ in range(cfg.ccp_iters):
        sp_, sn_ = _smooth(graph, y, task, cfg.lam)
        y_new = _update(logp, log1mp, sp_, sn_, cfg.alpha, cfg.lam, task)
        history.append(y_new)
        delta = np.abs(y_new - y).max()
        y = y_new
        if delta < cfg.ccp_tol:
            break
    return (y, history) if return_history else y


def _pairs(x, task):
    return np.concatenate([x, 1.0 - x], axis=1) if task == "multi_label" else x


def objective_value(labels, probs, graph, alpha, lam, task="single_label", pairs="unordered"):
    """Mean of ``-y.log p + alpha y.log y`` minus ``lam/N`` times the graph agreement.

    The graph agreement ``sum_ij w_ij y_i.y_j`` counts each unordered pair once
    by default (a factor 1/2 on the double sum). That is the objective whose
    concave-convex iterations are exactly :func:`ccp_solve`, so it decreases
    monotonically along them. ``pairs="ordered"`` keeps the full double sum.

    Multi-label sums the objective over every class's ``[p, 1 - p]`` pair.
    ``0 log 0`` is taken as 0.
    """
    if pairs not in ("unordered", "ordered"):
        raise ConfigError(f"pairs must be 'unordered' or 'ordered', got {pairs!r}")
    y = _pairs(_check(labels, task), task)
    p = _pairs(_check(probs, task), task)
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} and probs {p.shape} differ")
    n = y.shape[0]
    cross = -(y * _safe_log(p)).sum()
    ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0).sum()
    value = (cross + alpha * ylogy) / n
    if lam and graph is not None:
        if graph.n != n:
            raise ShapeError(f"graph has {graph.n} nodes but labels has {n} rows")
        scale = 0.5 if pairs == "unordered" else 1.0
        value -= scale * lam / n * float((y * laplacian_smooth(graph, y)).sum())
    return float(value)


def hard_labels(probs, threshold=0.0, task="single_label"):
    """Hard pseudo-labels and the mask of entries confident enough to keep.

    Single-label: one-hot argmax, keep mask of shape ``(N,)``.
    Multi-label: ``p >= 0.5`` per class, keep mask of shape ``(N, C)``.
    """
    p = _check(probs, task)
    if not 0.0 <= threshold < 1.0:
        raise ConfigError("threshold must lie in [0, 1)")
    if task == "single_label":
        labels = np.zeros_like(p)
        labels[np.arange(p.shape[0]), p.argmax(axis=1)] = 1.0
        keep = p.max(axis=1) >= threshold
    else:
        labels = (p >= 0.5).astype(float)
        keep = np.maximum(p, 1.0 - p) >= threshold
    return labels, keep
