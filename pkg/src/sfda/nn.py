"""A small dense network with batch norm and dropout, written against numpy.

Everything here works on plain ``float64`` arrays. A network is an ordered
list of :class:`LayerSpec` plus one parameter dict per layer. ``forward``
returns a :class:`ForwardTrace` holding what ``backward`` needs, so the same
trace can be reused for gradient checks.

The penultimate features of a network are the inputs of its last dense
layer.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

BN_EPS = 1e-5
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("dense", "batchnorm", "relu", "dropout")
LOSS_KINDS = ("cross_entropy", "binary_cross_entropy", "entropy_min", "dot_product")
TASKS = ("single_label", "multi_label")


@dataclass
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    rate: float = 0.0
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layer must keep its width")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError("batch-norm momentum must lie in (0, 1]")


@dataclass
class ForwardTrace:
    activations: list
    caches: list
    features: np.ndarray
    logits: np.ndarray
    mode: str
    bn_source: str


class MicroNet:
    """Parameters and batch-norm state of a small feed-forward network.

    ``trainable`` is ``"all"`` or ``"bn"`` (batch-norm scale and shift only).
    """

    def __init__(self, layers, params=None, trainable="all", seed=0):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in layers]
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if not any(l.kind == "dense" for l in self.layers):
            raise ConfigError("a network needs at least one dense layer")
        self.seed = int(seed)
        self.trainable = trainable
        self.params = params if params is not None else self._init_params()

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, value):
        if value not in ("all", "bn"):
            raise ConfigError(f"trainable mask must be 'all' or 'bn', got {value!r}")
        self._trainable = value

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def head_index(self):
        return max(i for i, l in enumerate(self.layers) if l.kind == "dense")

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        params = []
        for spec in self.layers:
            if spec.kind == "dense":
                bound = 1.0 / math.sqrt(spec.in_dim)
                params.append({
                    "W": rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)),
                    "b": rng.uniform(-bound, bound, size=spec.out_dim),
                })
            elif spec.kind == "batchnorm":
                params.append({
                    "gamma": np.ones(spec.out_dim),
                    "beta": np.zeros(spec.out_dim),
                    "running_mean": np.zeros(spec.out_dim),
                    "running_var": np.ones(spec.out_dim),
                })
            else:
                params.append({})
        return params

    def copy(self):
        return MicroNet(copy.deepcopy(self.layers), copy.deepcopy(self.params),
                        trainable=self.trainable, seed=self.seed)

    def trainable_keys(self, layer_index):
        """Parameter names of one layer that a gradient step may touch."""
        kind = self.layers[layer_index].kind
        if kind == "batchnorm":
            return ("gamma", "beta")
        if kind == "dense" and self.trainable == "all":
            return ("W", "b")
        return ()

    def has_batchnorm(self):
        return any(l.kind == "batchnorm" for l in self.layers)

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "trainable": self.trainable,
            "layers": [asdict(l) for l in self.layers],
            "params": [{k: v.tolist() for k, v in p.items()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
        params = [{k: np.asarray(v, dtype=float) for k, v in p.items()} for p in d["params"]]
        return cls(d["layers"], params, trainable=d["trainable"], seed=d["seed"])

    def save(self, path):
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def mlp(in_dim, hidden, out_dim, dropout=0.0, batchnorm=True, seed=0, momentum=0.1):
    """Build ``[dense, batchnorm, relu, dropout] * len(hidden) + dense``."""
    layers = []
    d = in_dim
    for h in hidden:
        layers.append(LayerSpec("dense", d, h))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", h, h, momentum=momentum))
        layers.append(LayerSpec("relu", h, h))
        if dropout > 0:
            layers.append(LayerSpec("dropout", h, h, rate=dropout))
        d = h
    layers.append(LayerSpec("dense", d, out_dim))
    return MicroNet(layers, seed=seed)


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def forward(net, batch, mode="clean", bn_source="running", seed=None, update_running=False):
    """Run ``batch`` through ``net``.

    ``mode="noisy"`` applies inverted dropout with masks drawn from ``seed``
    (an int or a ``numpy.random.Generator``). ``bn_source="batch"`` normalises
    with the statistics of ``batch`` itself; with ``update_running`` those
    statistics are also folded into the running estimates.
    """
    if mode not in ("clean", "noisy"):
        raise ConfigError(f"mode must be 'clean' or 'noisy', got {mode!r}")
    if bn_source not in ("running", "batch"):
        raise ConfigError(f"bn_source must be 'running' or 'batch', got {bn_source!r}")
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected a (n, {net.in_dim}) batch, got {x.shape}")
    if mode == "noisy":
        if seed is None:
            raise ConfigError("noisy forward needs a dropout seed")
        rng = _as_rng(seed)

    head = net.head_index
    activations = [x]
    caches = []
    features = None
    for i, (spec, p) in enumerate(zip(net.layers, net.params)):
        if i == head:
            features = x
        cache = None
        if spec.kind == "dense":
            x = x @ p["W"] + p["b"]
        elif spec.kind == "batchnorm":
            if bn_source == "batch":
                mu = x.mean(axis=0)
                var = x.var(axis=0)
                if update_running:
                    m = spec.momentum
                    p["running_mean"] = (1 - m) * p["running_mean"] + m * mu
                    p["running_var"] = np.maximum((1 - m) * p["running_var"] + m * var, BN_EPS)
            else:
                mu = p["running_mean"]
                var = p["running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mu) * inv_std
            cache = (xhat, inv_std)
            x = xhat * p["gamma"] + p["beta"]
        elif spec.kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif spec.kind == "dropout":
            if mode == "noisy" and spec.rate > 0:
                keep = rng.random(x.shape) >= spec.rate
                cache = keep / (1.0 - spec.rate)
                x = x * cache
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations after layer {i} ({spec.kind})")
        activations.append(x)
        caches.append(cache)
    return ForwardTrace(activations, caches, features, x, mode, bn_source)


def backward(net, trace, dlogits):
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits.

    Returns one dict per layer, keyed like ``net.params`` (trainable entries only
    are meaningful; running statistics never get gradients).
    """
    grads = [dict() for _ in net.layers]
    g = np.asarray(dlogits, dtype=float)
    for i in range(len(net.layers) - 1, -1, -1):
        spec, p, cache = net.layers[i], net.params[i], trace.caches[i]
        x_in = trace.activations[i]
        if spec.kind == "dense":
            grads[i]["W"] = x_in.T @ g
            grads[i]["b"] = g.sum(axis=0)
            g = g @ p["W"].T
        elif spec.kind == "batchnorm":
            xhat, inv_std = cache
            grads[i]["gamma"] = (g * xhat).sum(axis=0)
            grads[i]["beta"] = g.sum(axis=0)
            gx = g * p["gamma"]
            if trace.bn_source == "batch":
                n = g.shape[0]
                g = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                g = gx * inv_std
        elif spec.kind == "relu":
            g = g * cache
        elif spec.kind == "dropout":
            if cache is not None:
                g = g * cache
    return grads


def predict_probs(logits, task):
    """Softmax rows (single-label) or element-wise logistic (multi-label)."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    if task == "single_label":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    if task == "multi_label":
        return _sigmoid(z)
    raise ConfigError(f"unknown task {task!r}")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _log_softmax(z):
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def loss_and_grad(kind, logits, targets, task, weights=None):
    """Value and d/d logits of one of the four training losses, averaged over rows.

    ``targets`` are probability rows (single-label) or positive-class
    probabilities (multi-label); ``entropy_min`` ignores them. ``weights`` is an
    optional per-row (single-label) or per-entry (multi-label) mask.
    """
    z = np.asarray(logits, dtype=float)
    n = z.shape[0]
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {kind!r}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if kind == "cross_entropy" and task != "single_label":
        raise ConfigError("cross_entropy needs the single_label task; use binary_cross_entropy")
    if kind == "binary_cross_entropy" and task != "multi_label":
        raise ConfigError("binary_cross_entropy needs the multi_label task")
    if kind in ("cross_entropy", "binary_cross_entropy", "dot_product"):
        t = np.asarray(targets, dtype=float)
        if t.shape != z.shape:
            raise ShapeError(f"targets {t.shape} do not match logits {z.shape}")
    if weights is None:
        w = np.ones((n, 1) if task == "single_label" else z.shape)
    else:
        w = np.asarray(weights, dtype=float)
        if task == "single_label":
            w = w.reshape(n, 1)
        w = np.broadcast_to(w, z.shape if task == "multi_label" else (n, 1))

    if task == "single_label":
        logp = _log_softmax(z)
        p = np.exp(logp)
        if kind == "cross_entropy":
            value = -(w * t * logp).sum() / n
            grad = w * (p * t.sum(axis=1, keepdims=True) - t) / n
        elif kind == "entropy_min":
            ent = -(p * logp).sum(axis=1, keepdims=True)
            value = (w * ent).sum() / n
            grad = -w * p * (logp + ent) / n
        else:
            dot = (t * p).sum(axis=1, keepdims=True)
            value = -(w * dot).sum() / n
            grad = -w * p * (t - dot) / n
    else:
        s = _sigmoid(z)
        ls, lns = _log_sigmoid(z), _log_sigmoid(-z)
        if kind == "binary_cross_entropy":
            value = -(w * (t * ls + (1 - t) * lns)).sum() / n
            grad = w * (s - t) / n
        elif kind == "entropy_min":
            value = -(w * (s * ls + (1 - s) * lns)).sum() / n
            grad = -w * s * (1 - s) * z / n
        else:
            value = -(w * (t * s + (1 - t) * (1 - s))).sum() / n
            grad = -w * (2 * t - 1) * s * (1 - s) / n
    return float(value), grad


def marginal_entropy_and_grad(logits, task):
    """Negative entropy of the batch-mean prediction, and its gradient.

    Minimising it spreads predictions across classes (a uniform class-marginal
    prior). Multi-label sums the Bernoulli entropies of each class's mean.
    """
    z = np.asarray(logits, dtype=float)
    n = z.shape[0]
    p = predict_probs(z, task)
    pbar = np.clip(p.mean(axis=0), 1e-12, 1.0)
    if task == "single_label":
        value = float((pbar * np.log(pbar)).sum())
        gp = (np.log(pbar) + 1.0) / n
        grad = p * (gp - (p * gp).sum(axis=1, keepdims=True))
    else:
        qbar = np.clip(1.0 - pbar, 1e-12, 1.0)
        value = float((pbar * np.log(pbar) + qbar * np.log(qbar)).sum())
        gp = (np.log(pbar) - np.log(qbar)) / n
        grad = gp * p * (1 - p)
    return value, grad


def apply_gradients(net, grads, lr, freeze_head=False):
    head = net.head_index
    for i, g in enumerate(grads):
        if freeze_head and i == head:
            continue
        for key in net.trainable_keys(i):
            net.params[i][key] = net.params[i][key] - lr * g[key]


def backward_and_step(net, batch, targets, loss, lr, task, mode="clean", bn_source="running",
                      seed=None, weights=None, freeze_head=False, update_running=None):
    """One SGD step on ``net`` in place. Returns the pre-step loss value.

    ``loss`` is one of ``LOSS_KINDS`` or a callable mapping logits to
    ``(value, dlogits)`` for composite objectives.
    """
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if update_running is None:
        update_running = bn_source == "batch"
    trace = forward(net, batch, mode=mode, bn_source=bn_source, seed=seed,
                    update_running=update_running)
    if callable(loss):
        value, dlogits = loss(trace.logits)
    else:
        value, dlogits = loss_and_grad(loss, trace.logits, targets, task, weights)
    if lr > 0:
        apply_gradients(net, backward(net, trace, dlogits), lr, freeze_head=freeze_head)
    return value


def cosine_decay(base_lr, step, total_steps):
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def recompute_bn_stats(net, dataset):
    """Replace every batch-norm layer's running statistics with dataset moments.

    Layers are processed in order, so a later layer sees activations produced
    with the already-updated statistics of earlier layers. Returns a new net.
    """
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot recompute batch-norm statistics on an empty dataset")
    if x.shape[1] != net.in_dim:
        raise ShapeError(f"expected {net.in_dim} input columns, got {x.shape[1]}")
    out = net.copy()
    for spec, p in zip(out.layers, out.params):
        if spec.kind == "dense":
            x = x @ p["W"] + p["b"]
        elif spec.kind == "batchnorm":
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            p["running_mean"] = mu
            p["running_var"] = np.maximum(var, BN_EPS)
            x = (x - mu) / np.sqrt(p["running_var"] + BN_EPS) * p["gamma"] + p["beta"]
        elif spec.kind == "relu":
            x = np.maximum(x, 0.0)
    return out
