"""Source-free adaptation methods sharing one training harness.

Every ``adapt_*`` function takes a :class:`SourceModel`, the unlabelled
adaptation inputs and a :class:`MethodConfig`, and returns a fresh adapted
:class:`~sfda.nn.MicroNet` plus an :class:`AdaptationTrajectory`. The source
model is never modified. Test labels only enter through the optional
``evaluate`` callback, which sees the network and nothing else.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import metrics
from .errors import ConfigError, DataError
from .graph import build_mutual_knn, extended_neighbors, knn_indices
from .nn import (MicroNet, backward_and_step, cosine_decay, forward, loss_and_grad,
                 marginal_entropy_and_grad, predict_probs, recompute_bn_stats)
from .pseudo import SolverConfig, ccp_solve, hard_labels, teacher_rows, teacher_step

log = logging.getLogger(__name__)

METHODS = ("source", "adabn", "em", "pl", "dust", "shot", "dropout_student", "notela", "nrc")

_COMMON_FIELDS = ("method", "lr", "epochs", "batch_size", "trainable", "use_dropout",
                  "use_source_bn", "cosine_decay", "seed")
_METHOD_FIELDS = {
    "source": (),
    "adabn": (),
    "em": (),
    "pl": ("threshold",),
    "dust": ("passes", "kl_threshold", "kl_rule"),
    "shot": ("beta",),
    "dropout_student": ("alpha", "update_frequency"),
    "notela": ("alpha", "lam", "k", "update_frequency", "scheme", "metric", "self_weight",
               "ccp_iters", "freeze_graph"),
    "nrc": ("k", "k_ext", "base_affinity", "prior_weight"),
}


@dataclass(frozen=True)
class MethodConfig:
    method: str = "notela"
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    trainable: str = "all"
    use_dropout: bool = True
    use_source_bn: bool = True
    cosine_decay: bool = False
    seed: int = 0
    # pseudo-labelling
    threshold: float = 0.0
    # DUST
    passes: int = 2
    kl_threshold: float = 0.9
    kl_rule: str = "quantile"
    # SHOT
    beta: float = 0.3
    # dropout student / NOTELA
    alpha: float = 1.0
    lam: Optional[float] = None  # None ties lambda to alpha
    k: int = 10
    update_frequency: str = "every_epoch"
    scheme: str = "normalized_psd"
    metric: str = "euclidean"
    self_weight: float = 0.0
    ccp_iters: int = 1
    freeze_graph: bool = False
    # NRC
    k_ext: int = 5
    base_affinity: float = 0.1
    prior_weight: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.trainable not in ("all", "bn"):
            raise ConfigError(f"trainable must be 'all' or 'bn', got {self.trainable!r}")
        if self.beta < 0:
            raise ConfigError("SHOT beta must be non-negative")
        if self.passes < 2 and self.method == "dust":
            raise ConfigError("DUST needs at least two stochastic passes")
        if self.kl_rule not in ("quantile", "absolute"):
            raise ConfigError(f"unknown DUST kl_rule {self.kl_rule!r}")
        if self.method in ("notela", "dropout_student"):
            self.solver()  # validates alpha / lambda / frequency

    @property
    def lam_value(self):
        if self.method == "dropout_student":
            return 0.0
        return self.alpha if self.lam is None else self.lam

    def solver(self):
        return SolverConfig(alpha=self.alpha, lam=self.lam_value, ccp_iters=self.ccp_iters,
                            update_frequency=self.update_frequency)

    def relevant(self):
        """The fields that matter for this method, as a plain dict."""
        d = asdict(self)
        keep = _COMMON_FIELDS + _METHOD_FIELDS[self.method]
        return {k: d[k] for k in keep}

    def config_hash(self):
        blob = json.dumps({k: v for k, v in self.relevant().items() if k != "seed"},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown method config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SourceModel:
    net: MicroNet
    task: str
    n_classes: int


@dataclass
class AdaptationTrajectory:
    records: list = field(default_factory=list)

    def append(self, epoch, loss, report):
        rec = {"epoch": epoch, "loss": loss}
        for key in ("map", "cmap", "top1", "mean_max_conf", "mean_prob"):
            rec[key] = report.get(key, float("nan")) if report else float("nan")
        self.records.append(rec)

    def column(self, key):
        return np.array([r[key] for r in self.records], dtype=float)

    def __len__(self):
        return len(self.records)


def make_evaluator(x, labels, task, min_positives=5):
    """Callback computing the metric report of a network on a held-out split."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)

    def evaluate(net):
        probs = predict_probs(forward(net, x).logits, task)
        return metrics.evaluate(probs, labels, task, min_positives)

    return evaluate


class _Run:
    """Shared state of one adaptation run: RNG streams, LR schedule, trajectory."""

    def __init__(self, src, x, cfg, evaluate):
        self.net = src.net.copy()
        self.task = src.task
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise DataError("the adaptation set is empty")
        self.cfg = cfg
        self.evaluate = evaluate
        shuffle_ss, dropout_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.dropout_rng = np.random.default_rng(dropout_ss)
        self.n = self.x.shape[0]
        self.steps_per_epoch = math.ceil(self.n / cfg.batch_size)
        self.total_steps = max(1, self.steps_per_epoch * cfg.epochs)
        self.step = 0
        self.trajectory = AdaptationTrajectory()
        self.snapshot(0, float("nan"))

    @property
    def bn_source(self):
        return "running" if self.cfg.use_source_bn else "batch"

    @property
    def student_mode(self):
        return "noisy" if self.cfg.use_dropout else "clean"

    def snapshot(self, epoch, loss):
        report = self.evaluate(self.net) if self.evaluate else None
        self.trajectory.append(epoch, loss, report)

    def lr(self):
        if self.cfg.cosine_decay:
            return cosine_decay(self.cfg.lr, min(self.step, self.total_steps), self.total_steps)
        return self.cfg.lr

    def batches(self):
        perm = self.shuffle_rng.permutation(self.n)
        for s in range(0, self.n, self.cfg.batch_size):
            yield perm[s:s + self.cfg.batch_size]

    def teacher(self, x=None):
        """Clean forward pass: probabilities and penultimate features."""
        trace = forward(self.net, self.x if x is None else x, bn_source=self.bn_source)
        return predict_probs(trace.logits, self.task), trace.features

    def student_step(self, rows, targets, loss, weights=None, freeze_head=False):
        seed = self.dropout_rng.integers(2**63) if self.student_mode == "noisy" else None
        value = backward_and_step(self.net, self.x[rows], targets, loss, self.lr(), self.task,
                                  mode=self.student_mode, bn_source=self.bn_source, seed=seed,
                                  weights=weights, freeze_head=freeze_head)
        self.step += 1
        return value

    def result(self):
        return self.net, self.trajectory


def _supervised_loss(task):
    return "cross_entropy" if task == "single_label" else "binary_cross_entropy"


def _check_method(cfg, *names):
    if cfg.method not in names:
        raise ConfigError(f"config is for method {cfg.method!r}, expected one of {names}")


def adapt_source(src, adapt_x, cfg, evaluate=None):
    """No adaptation: the evaluation-only baseline."""
    run = _Run(src, adapt_x, cfg, evaluate)
    for epoch in range(1, cfg.epochs + 1):
        run.trajectory.records.append(dict(run.trajectory.records[0], epoch=epoch))
    return run.result()


def adapt_notela(src, adapt_x, cfg, evaluate=None):
    """Noisy student trained on Laplacian-adjusted soft pseudo-labels.

    Each refresh runs a clean pass to get probabilities and features, builds
    the mutual k-NN graph on the features and applies the closed-form teacher
    update; the student then takes dropout-noised gradient steps towards the
    pseudo-labels.
    """
    _check_method(cfg, "notela", "dropout_student")
    run = _Run(src, adapt_x, cfg, evaluate)
    solver = cfg.solver()
    k = min(cfg.k, run.n - 1)
    loss_kind = _supervised_loss(run.task)
    graph = None
    for epoch in range(1, cfg.epochs + 1):
        probs, feats = run.teacher()
        if solver.lam and (graph is None or not cfg.freeze_graph):
            graph = build_mutual_knn(feats, k, scheme=cfg.scheme, metric=cfg.metric,
                                     self_weight=cfg.self_weight)
        if solver.update_frequency == "every_epoch":
            if solver.ccp_iters > 1:
                labels = ccp_solve(probs, graph, solver, run.task)
            else:
                labels = teacher_step(probs, graph, solver, run.task)
        losses = []
        for rows in run.batches():
            if solver.update_frequency == "every_iteration":
                probs[rows] = run.teacher(run.x[rows])[0]
                targets = teacher_rows(rows, probs, graph, solver, run.task)
            else:
                targets = labels[rows]
            losses.append(run.student_step(rows, targets, loss_kind))
        run.snapshot(epoch, float(np.mean(losses)))
    return run.result()


def adapt_dropout_student(src, adapt_x, cfg, evaluate=None):
    """NOTELA without the graph term: the same network is teacher (clean) and student (dropout)."""
    if cfg.method == "notela":
        cfg = replace(cfg, lam=0.0)
    _check_method(cfg, "notela", "dropout_student")
    return adapt_notela(src, adapt_x, cfg, evaluate)


def adapt_pl(src, adapt_x, cfg, evaluate=None):
    """Hard pseudo-labels from the current model, refreshed every epoch."""
    _check_method(cfg, "pl")
    run = _Run(src, adapt_x, cfg, evaluate)
    loss_kind = _supervised_loss(run.task)
    for epoch in range(1, cfg.epochs + 1):
        probs, _ = run.teacher()
        labels, keep = hard_labels(probs, cfg.threshold, run.task)
        if not keep.any():
            log.warning("pseudo-labelling kept no samples at threshold %s; model unchanged",
                        cfg.threshold)
            run.snapshot(epoch, float("nan"))
            continue
        losses = []
        for rows in run.batches():
            w = keep[rows].astype(float)
            if not w.any():
                continue
            losses.append(run.student_step(rows, labels[rows], loss_kind, weights=w))
        run.snapshot(epoch, float(np.mean(losses)) if losses else float("nan"))
    return run.result()


def adapt_em(src, adapt_x, cfg, evaluate=None):
    """Entropy minimisation on batch-norm scale and shift, with batch statistics.

    Running statistics are refreshed from every batch as it goes through.
    """
    _check_method(cfg, "em")
    cfg = replace(cfg, trainable="bn", use_source_bn=False)
    run = _Run(src, adapt_x, cfg, evaluate)
    run.net.trainable = "bn"
    for epoch in range(1, cfg.epochs + 1):
        losses = [run.student_step(rows, None, "entropy_min") for rows in run.batches()]
        run.snapshot(epoch, float(np.mean(losses)))
    return run.result()


def adapt_adabn(src, adapt_x, cfg, evaluate=None):
    """Batch-norm population statistics recomputed on the adaptation set, nothing else."""
    _check_method(cfg, "adabn")
    run = _Run(src, adapt_x, cfg, evaluate)
    if run.net.has_batchnorm():
        run.net = recompute_bn_stats(run.net, run.x)
    report = run.evaluate(run.net) if run.evaluate else None
    for epoch in range(1, cfg.epochs + 1):
        run.trajectory.append(epoch, float("nan"), report)
    return run.result()


def _pairwise_kl(pa, pb, task):
    eps = 1e-12
    if task == "multi_label":
        pa = np.stack([pa, 1 - pa], axis=-1)
        pb = np.stack([pb, 1 - pb], axis=-1)
    pa, pb = np.clip(pa, eps, 1), np.clip(pb, eps, 1)
    kl = (pa * (np.log(pa) - np.log(pb))).sum(axis=-1) + (pb * (np.log(pb) - np.log(pa))).sum(axis=-1)
    return kl if task == "single_label" else kl.sum(axis=-1)


def dust_reliability(net, x, task, seeds, kl_threshold, kl_rule="quantile", bn_source="running"):
    """Reliable-sample mask from the disagreement between stochastic passes.

    Disagreement is the largest symmetric KL divergence over all pairs of
    passes (one pass per seed). ``kl_rule="quantile"`` keeps samples whose
    disagreement is at most the ``floor(q N)``-th smallest value (none when that
    count is 0); ``"absolute"`` keeps disagreement ``<= kl_threshold``.
    """
    passes = [predict_probs(forward(net, x, mode="noisy", bn_source=bn_source, seed=s).logits, task)
              for s in seeds]
    kl = np.zeros(len(x))
    for a, b in itertools.combinations(range(len(passes)), 2):
        kl = np.maximum(kl, _pairwise_kl(passes[a], passes[b], task))
    if kl_rule == "absolute":
        return kl <= kl_threshold, kl
    count = math.floor(kl_threshold * len(kl) + 1e-9)
    if count <= 0:
        return np.zeros(len(kl), dtype=bool), kl
    cut = np.sort(kl)[count - 1]
    return kl <= cut, kl


def adapt_dust(src, adapt_x, cfg, evaluate=None):
    """Hard pseudo-labels trained only on samples whose dropout passes agree."""
    _check_method(cfg, "dust")
    run = _Run(src, adapt_x, cfg, evaluate)
    loss_kind = _supervised_loss(run.task)
    for epoch in range(1, cfg.epochs + 1):
        seeds = run.dropout_rng.integers(2**63, size=cfg.passes)
        reliable, _ = dust_reliability(run.net, run.x, run.task, seeds, cfg.kl_threshold,
                                       cfg.kl_rule, run.bn_source)
        if not reliable.any():
            log.warning("DUST found no reliable samples; model unchanged this epoch")
            run.snapshot(epoch, float("nan"))
            continue
        probs, _ = run.teacher()
        labels, _ = hard_labels(probs, 0.0, run.task)
        losses = []
        for rows in run.batches():
            w = reliable[rows].astype(float)
            if not w.any():
                continue
            if run.task == "multi_label":
                w = np.repeat(w[:, None], labels.shape[1], axis=1)
            losses.append(run.student_step(rows, labels[rows], loss_kind, weights=w))
        run.snapshot(epoch, float(np.mean(losses)) if losses else float("nan"))
    return run.result()


def nearest_centroid_labels(probs, feats, task):
    """Pseudo-labels from probability-weighted feature centroids, by cosine distance.

    Single-label: one centroid per class, label = closest centroid.
    Multi-label: a positive and a negative centroid per class, label 1 when the
    positive one is closer.
    """
    f = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)

    def unit(c):
        return c / np.maximum(np.linalg.norm(c, axis=-1, keepdims=True), 1e-12)

    if task == "single_label":
        cent = unit(probs.T @ f / np.maximum(probs.sum(axis=0), 1e-12)[:, None])
        labels = np.zeros_like(probs)
        labels[np.arange(len(f)), np.argmax(f @ cent.T, axis=1)] = 1.0
        return labels
    pos = unit(probs.T @ f / np.maximum(probs.sum(axis=0), 1e-12)[:, None])
    neg = unit((1 - probs).T @ f / np.maximum((1 - probs).sum(axis=0), 1e-12)[:, None])
    return (f @ pos.T > f @ neg.T).astype(float)


def adapt_shot_lite(src, adapt_x, cfg, evaluate=None):
    """Frozen head; information maximisation plus beta-weighted nearest-centroid pseudo-labels."""
    _check_method(cfg, "shot")
    run = _Run(src, adapt_x, cfg, evaluate)
    sup = _supervised_loss(run.task)
    for epoch in range(1, cfg.epochs + 1):
        probs, feats = run.teacher()
        labels = nearest_centroid_labels(probs, feats, run.task)
        losses = []
        for rows in run.batches():
            targets = labels[rows]

            def loss(logits, targets=targets):
                v_ent, g_ent = loss_and_grad("entropy_min", logits, None, run.task)
                v_div, g_div = marginal_entropy_and_grad(logits, run.task)
                value, grad = v_ent + v_div, g_ent + g_div
                if cfg.beta:
                    v_ce, g_ce = loss_and_grad(sup, logits, targets, run.task)
                    value, grad = value + cfg.beta * v_ce, grad + cfg.beta * g_ce
                return value, grad

            losses.append(run.student_step(rows, None, loss, freeze_head=True))
        run.snapshot(epoch, float(np.mean(losses)))
    return run.result()


def nrc_affinity_targets(probs, feats, k, k_ext, base_affinity, metric="cosine"):
    """Per-sample neighbour targets and total affinity mass for the NRC-lite loss.

    Direct neighbours weigh 1 when the relation is reciprocal and
    ``base_affinity`` otherwise; extended neighbours weigh ``base_affinity``.
    Returns ``(targets, mass)`` with ``targets_i = sum_j a_ij p_j`` and
    ``mass_i = sum_j a_ij``.
    """
    n = probs.shape[0]
    k = min(k, n - 1)
    nbrs = knn_indices(feats, k, metric)
    in_list = np.zeros((n, n), dtype=bool) if n <= 4096 else None
    if in_list is not None:
        in_list[np.repeat(np.arange(n), k), nbrs.ravel()] = True
        recip = in_list[nbrs, np.arange(n)[:, None]]
    else:
        sets = [set(r.tolist()) for r in nbrs]
        recip = np.array([[i in sets[j] for j in nbrs[i]] for i in range(n)])
    a = np.where(recip, 1.0, base_affinity)
    targets = np.einsum("nk,nkc->nc", a, probs[nbrs])
    mass = a.sum(axis=1)
    if k_ext > 0 and base_affinity > 0:
        for i, ext in enumerate(extended_neighbors(nbrs, min(k_ext, k))):
            if ext.size:
                targets[i] += base_affinity * probs[ext].sum(axis=0)
                mass[i] += base_affinity * ext.size
    return targets, mass


def nrc_loss(logits, targets, mass, task, prior_weight=1.0):
    """Dot-product neighbour agreement plus a uniform class-marginal prior."""
    n = logits.shape[0]
    p = predict_probs(logits, task)
    if task == "single_label":
        dot = (targets * p).sum(axis=1, keepdims=True)
        value = -dot.sum() / n
        grad = -p * (targets - dot) / n
    else:
        value = -(targets * p + (mass[:, None] - targets) * (1 - p)).sum() / n
        grad = -(2 * targets - mass[:, None]) * p * (1 - p) / n
    if prior_weight:
        v_div, g_div = marginal_entropy_and_grad(logits, task)
        value, grad = value + prior_weight * v_div, grad + prior_weight * g_div
    return float(value), grad


def adapt_nrc_lite(src, adapt_x, cfg, evaluate=None):
    """Neighbourhood agreement with reciprocal, non-reciprocal and extended neighbours."""
    _check_method(cfg, "nrc")
    run = _Run(src, adapt_x, cfg, evaluate)
    for epoch in range(1, cfg.epochs + 1):
        probs, feats = run.teacher()
        targets, mass = nrc_affinity_targets(probs, feats, cfg.k, cfg.k_ext, cfg.base_affinity)
        losses = []
        for rows in run.batches():
            t, m = targets[rows], mass[rows]
            losses.append(run.student_step(
                rows, None, lambda z, t=t, m=m: nrc_loss(z, t, m, run.task, cfg.prior_weight)))
        run.snapshot(epoch, float(np.mean(losses)))
    return run.result()


ADAPTERS: dict = {
    "source": adapt_source,
    "adabn": adapt_adabn,
    "em": adapt_em,
    "pl": adapt_pl,
    "dust": adapt_dust,
    "shot": adapt_shot_lite,
    "dropout_student": adapt_dropout_student,
    "notela": adapt_notela,
    "nrc": adapt_nrc_lite,
}


def adapt(src, adapt_x, cfg, evaluate=None):
    """Dispatch on ``cfg.method``."""
    return ADAPTERS[cfg.method](src, adapt_x, cfg, evaluate)


# Hyperparameter grids; NOTELA ties lambda to alpha.
_SHARED_GRID = {
    "lr": [1e-5, 1e-4, 1e-3],
    "trainable": ["bn", "all"],
    "use_dropout": [True, False],
    "use_source_bn": [True, False],
    "cosine_decay": [True, False],
}
DEFAULT_GRIDS = {
    "source": {},
    "adabn": {},
    "em": dict(_SHARED_GRID),
    "shot": dict(_SHARED_GRID, beta=[0.0, 0.3, 0.6, 0.9]),
    "pl": dict(_SHARED_GRID, threshold=[0.0, 0.5, 0.9, 0.95]),
    "dropout_student": dict(_SHARED_GRID, alpha=[0.1, 1.0],
                            update_frequency=["every_iteration", "every_epoch"]),
    "dust": dict(_SHARED_GRID, passes=[2, 3, 4], kl_threshold=[0.8, 0.9, 0.99]),
    "nrc": dict(_SHARED_GRID, k=[5, 10, 15], k_ext=[5, 10, 15], base_affinity=[0.1, 0.2]),
    "notela": dict(_SHARED_GRID, k=[5, 10, 15], alpha=[0.1, 1.0],
                   update_frequency=["every_iteration", "every_epoch"]),
}


def expand_grid(grid, base=None, subset=None, seed=0):
    """Cartesian product of ``grid`` (keys in sorted order) as a list of configs.

    ``subset`` keeps that many points, drawn without replacement with ``seed``
    and returned in grid order.
    """
    base = base or MethodConfig()
    keys = sorted(grid)
    if any(len(grid[k]) == 0 for k in keys):
        raise ConfigError("grid has an empty axis")
    points = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    if subset is not None and subset < len(points):
        pick = np.sort(np.random.default_rng(seed).choice(len(points), subset, replace=False))
        points = [points[i] for i in pick]
    configs = []
    for p in points:
        if "alpha" in p and base.method == "notela":
            p = dict(p, lam=None)
        configs.append(replace(base, **p))
    if not configs:
        raise ConfigError("grid is empty")
    return configs


@dataclass
class GridResult:
    best: MethodConfig
    scores: dict  # config hash -> mean selection score
    rows: list


def selection_score(report, task):
    return report["map"] if task == "multi_label" else report["top1"]


def run_grid(src, configs, validation, seeds=(0,), domain="validation"):
    """Evaluate every config on the validation domain, averaged over seeds.

    ``validation`` is ``(adapt_x, test_x, test_labels)`` from the held-out
    domain. Selection uses final-epoch test mAP (multi-label) or top-1
    (single-label); ties go to the earliest config.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("grid is empty")
    adapt_x, test_x, test_y = validation
    evaluate = make_evaluator(test_x, test_y, src.task)
    rows, scores = [], {}
    best, best_score = None, -np.inf
    for cfg in configs:
        vals = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            _, traj = adapt(src, adapt_x, run_cfg, evaluate)
            rows.extend(trajectory_rows(run_cfg, traj, domain, "test"))
            vals.append(selection_score(traj.records[-1], src.task))
        score = float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else -np.inf
        scores[cfg.config_hash()] = score
        if score > best_score:
            best, best_score = cfg, score
    return GridResult(best=best if best is not None else configs[0], scores=scores, rows=rows)


RESULT_COLUMNS = ("method", "config_hash", "seed", "domain", "split", "epoch",
                  "map", "cmap", "top1", "mean_max_conf")


def trajectory_rows(cfg, traj, domain, split):
    """One results-table row per trajectory record."""
    h = cfg.config_hash()
    return [{"method": cfg.method, "config_hash": h, "seed": cfg.seed, "domain": domain,
             "split": split, "epoch": r["epoch"], "map": r["map"], "cmap": r["cmap"],
             "top1": r["top1"], "mean_max_conf": r["mean_max_conf"]} for r in traj.records]
