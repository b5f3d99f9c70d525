"""Synthetic source/target domains built from Gaussian class prototypes.

Single-label samples sit at one class prototype plus isotropic noise.
Multi-label samples sum the prototypes of every present class (zero present
classes is allowed) plus noise. A target domain is the source generative
process pushed through a :class:`ShiftSpec`: an affine map of the features,
extra noise, random feature dropout, and a restricted / reweighted label set.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .methods import SourceModel
from .metrics import sample_map
from .nn import backward_and_step, forward, mlp, predict_probs

log = logging.getLogger(__name__)


def _arr(x):
    return None if x is None else np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class DomainSpec:
    prototypes: np.ndarray           # (C, D)
    label_mode: str = "single"       # "single" or "multi"
    priors: np.ndarray = None        # (C,), single mode
    activation: np.ndarray = None    # (C,), multi mode
    noise: float = 0.5
    transform_a: np.ndarray = None   # (D, D), identity when None
    transform_b: np.ndarray = None   # (D,)
    extra_noise: float = 0.0
    feature_dropout: float = 0.0
    name: str = "source"

    def __post_init__(self):
        object.__setattr__(self, "prototypes", _arr(self.prototypes))
        c, d = self.prototypes.shape
        if self.label_mode not in ("single", "multi"):
            raise ConfigError(f"label_mode must be 'single' or 'multi', got {self.label_mode!r}")
        if self.label_mode == "single":
            pri = np.full(c, 1.0 / c) if self.priors is None else _arr(self.priors)
            if pri.shape != (c,) or np.any(pri < 0) or not np.isclose(pri.sum(), 1.0):
                raise ConfigError("single-label priors must be a length-C probability vector")
            object.__setattr__(self, "priors", pri)
        else:
            act = np.full(c, 0.2) if self.activation is None else _arr(self.activation)
            if act.shape != (c,) or np.any(act < 0) or np.any(act > 1):
                raise ConfigError("multi-label activation probabilities must lie in [0, 1]")
            object.__setattr__(self, "activation", act)
        if len({tuple(p) for p in self.prototypes}) != c:
            raise ConfigError("class prototypes must be distinct")
        for name in ("transform_a", "transform_b"):
            object.__setattr__(self, name, _arr(getattr(self, name)))

    @property
    def n_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    @property
    def task(self):
        return "single_label" if self.label_mode == "single" else "multi_label"

    def to_dict(self):
        def lst(x):
            return None if x is None else x.tolist()
        return {"name": self.name, "label_mode": self.label_mode,
                "prototypes": lst(self.prototypes), "priors": lst(self.priors),
                "activation": lst(self.activation), "noise": self.noise,
                "transform_a": lst(self.transform_a), "transform_b": lst(self.transform_b),
                "extra_noise": self.extra_noise, "feature_dropout": self.feature_dropout}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("label_mode") == "single":
            d.pop("activation", None)
        else:
            d.pop("priors", None)
        return cls(**d)

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, DomainSpec) and self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class ShiftSpec:
    transform_a: np.ndarray = None
    transform_b: np.ndarray = None
    noise: float = 0.0
    feature_dropout: float = 0.0
    label_subset: tuple = None
    prior_weights: np.ndarray = None
    severity: int = 1
    name: str = "target"

    def __post_init__(self):
        if self.label_subset is not None and len(self.label_subset) == 0:
            raise ConfigError("label subset must not be empty")
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity must be between 1 and 5")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError("features and labels must have the same number of rows")

    @property
    def task(self):
        return self.provenance.get("task", "multi_label")

    def __len__(self):
        return len(self.features)

    def subset(self, rows):
        return LabeledDataset(self.features[rows], self.labels[rows], dict(self.provenance))


def generate_domain(spec, n, seed):
    """Draw ``n`` labelled samples from ``spec``; fully determined by (spec, n, seed)."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)
    c, d = spec.prototypes.shape
    labels = np.zeros((n, c), dtype=np.int64)
    if spec.label_mode == "single":
        cls = rng.choice(c, size=n, p=spec.priors)
        labels[np.arange(n), cls] = 1
    else:
        labels[:] = rng.random((n, c)) < spec.activation
    x = labels @ spec.prototypes + spec.noise * rng.standard_normal((n, d))
    if spec.transform_a is not None:
        x = x @ spec.transform_a.T
    if spec.transform_b is not None:
        x = x + spec.transform_b
    if spec.extra_noise:
        x = x + spec.extra_noise * rng.standard_normal((n, d))
    if spec.feature_dropout:
        x = x * (rng.random((n, d)) >= spec.feature_dropout)
    prov = {"domain": spec.name, "seed": int(seed), "spec_hash": spec.spec_hash(),
            "task": spec.task, "n": int(n)}
    return LabeledDataset(x, labels, prov)


def apply_shift(spec, shift):
    """Compose ``shift`` into the generative process of ``spec``."""
    a_old = spec.transform_a
    b_old = spec.transform_b
    a_new = _arr(shift.transform_a)
    b_new = _arr(shift.transform_b)
    a, b = a_old, b_old
    if a_new is not None:
        a = a_new if a_old is None else a_new @ a_old
        b = None if b_old is None else a_new @ b_old
    if b_new is not None:
        b = b_new if b is None else b + b_new
    # earlier extra noise now passes through the new map; treated as isotropic at its spectral norm
    gain = 1.0 if a_new is None else float(np.linalg.norm(a_new, 2))
    extra = float(np.hypot(spec.extra_noise * gain, shift.noise))
    drop = 1.0 - (1.0 - spec.feature_dropout) * (1.0 - shift.feature_dropout)

    c = spec.n_classes
    mask = np.ones(c)
    if shift.label_subset is not None:
        mask = np.zeros(c)
        mask[list(shift.label_subset)] = 1.0
    weights = mask if shift.prior_weights is None else mask * _arr(shift.prior_weights)
    kwargs = dict(transform_a=a, transform_b=b, extra_noise=extra, feature_dropout=drop,
                  name=shift.name)
    if spec.label_mode == "single":
        pri = spec.priors * weights
        if pri.sum() <= 0:
            raise ConfigError("shift removes every class")
        kwargs["priors"] = pri / pri.sum()
    else:
        kwargs["activation"] = np.clip(spec.activation * weights, 0.0, 1.0)
    return replace(spec, **kwargs)


def is_identity(shift):
    return (shift.transform_a is None and shift.transform_b is None and not shift.noise
            and not shift.feature_dropout and shift.label_subset is None
            and shift.prior_weights is None)


def split_adapt_test(ds, ratio=0.75, seed=0):
    """Disjoint adapt/test partition, stratified by each row's first positive class."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    has_pos = ds.labels.sum(axis=1) > 0
    strata = np.where(has_pos, ds.labels.argmax(axis=1), -1)
    adapt_rows = []
    for s in np.unique(strata):
        rows = np.flatnonzero(strata == s)
        rows = rows[rng.permutation(len(rows))]
        adapt_rows.append(rows[:int(round(ratio * len(rows)))])
    adapt_rows = np.sort(np.concatenate(adapt_rows))
    test_rows = np.setdiff1d(np.arange(len(ds)), adapt_rows)
    if len(test_rows) == 0:
        raise DataError("split leaves the test set empty")
    if len(adapt_rows) == 0:
        raise DataError("split leaves the adaptation set empty")
    return ds.subset(adapt_rows), ds.subset(test_rows)


def filter_single_label(ds):
    """Keep only rows with exactly one positive label; the task becomes single-label."""
    keep = ds.labels.sum(axis=1) == 1
    if not keep.any():
        log.warning("filter_single_label: no row has exactly one positive label")
    out = ds.subset(np.flatnonzero(keep))
    out.provenance["task"] = "single_label"
    out.provenance["filtered_single_label"] = True
    return out


def train_source(spec, n, hidden=(32, 32), epochs=60, seed=0, lr=0.1, batch_size=64,
                 dropout=0.2, target=0.95):
    """Supervised training on ``spec``; fails unless train accuracy / mAP reaches ``target``."""
    ds = generate_domain(spec, n, seed)
    task = spec.task
    net = mlp(spec.dim, hidden, spec.n_classes, dropout=dropout, seed=seed)
    rng = np.random.default_rng(seed + 1)
    loss = "cross_entropy" if task == "single_label" else "binary_cross_entropy"
    x, y = ds.features, ds.labels.astype(float)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            rows = perm[s:s + batch_size]
            if len(rows) < 2:
                continue
            backward_and_step(net, x[rows], y[rows], loss, lr, task, mode="noisy",
                              bn_source="batch", seed=rng.integers(2**63))
    score = source_score(net, ds)
    if score < target:
        raise DataError(f"source training reached {score:.3f} < {target}; "
                        "increase capacity or epochs")
    return SourceModel(net=net, task=task, n_classes=spec.n_classes)


def source_score(net, ds):
    probs = predict_probs(forward(net, ds.features).logits, ds.task)
    if ds.task == "single_label":
        return float((probs.argmax(axis=1) == ds.labels.argmax(axis=1)).mean())
    return sample_map(probs, ds.labels)


def _fmt(v):
    return repr(float(v))


def save_dataset(ds, directory):
    """Write ``features.csv``, ``labels.csv`` and ``meta.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    for row in ds.features:
        wr.writerow([_fmt(v) for v in row])
    (directory / "features.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    for row in ds.labels:
        wr.writerow([int(v) for v in row])
    (directory / "labels.csv").write_text(buf.getvalue())
    (directory / "meta.json").write_text(json.dumps(ds.provenance, indent=2, sort_keys=True) + "\n")


def load_dataset(directory):
    directory = Path(directory)
    for name in ("features.csv", "labels.csv", "meta.json"):
        if not (directory / name).exists():
            raise DataError(f"missing {name} in {directory}")
    x = np.loadtxt(directory / "features.csv", delimiter=",", ndmin=2)
    y = np.loadtxt(directory / "labels.csv", delimiter=",", ndmin=2, dtype=np.int64)
    prov = json.loads((directory / "meta.json").read_text())
    return LabeledDataset(x, y, prov)


def severity_shift(severity, dim, seed=0, label_subset=None, prior_weights=None, name=None):
    """Affine + noise shift whose strength grows with ``severity`` (1-5).

    The map shrinks features by ``1 - 0.1 s`` and mixes in a random rotation
    with weight ``0.1 s``; extra noise is ``0.06 s``. Severity 5 leaves a source
    model almost silent on the target.
    """
    if not 1 <= severity <= 5:
        raise ConfigError("severity must be between 1 and 5")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    mix = 0.1 * severity
    a = (1.0 - 0.1 * severity) * ((1.0 - mix) * np.eye(dim) + mix * q)
    b = 0.06 * severity * rng.standard_normal(dim)
    return ShiftSpec(transform_a=a, transform_b=b, noise=0.06 * severity,
                     label_subset=None if label_subset is None else tuple(label_subset),
                     prior_weights=prior_weights, severity=severity,
                     name=name or f"severity{severity}")


@dataclass(frozen=True)
class BenchSuite:
    source: DomainSpec
    targets: dict           # name -> DomainSpec
    validation: str         # key of the held-out selection domain
    extreme: str            # key of the low-confidence domain

    @property
    def test_domains(self):
        return [k for k in self.targets if k != self.validation]


def bench_suite(label_mode="multi", n_classes=10, dim=16, seed=0):
    """Source domain plus four shifted targets, one of them held out for selection.

    Every target restricts or reweights the label set and applies a
    :func:`severity_shift`; ``"extreme"`` is the severity-5 domain.
    """
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((n_classes, dim))
    if label_mode == "multi":
        source = DomainSpec(protos, label_mode="multi", activation=np.full(n_classes, 0.15),
                            noise=0.4, name="source")
    else:
        source = DomainSpec(protos, label_mode="single", noise=0.8, name="source")
    c = n_classes
    if c < 2:
        raise ConfigError("the bench needs at least two classes")
    keep = lambda frac: max(1, int(round(frac * c)))  # noqa: E731
    plan = [
        ("validation", 3, range(0, keep(0.8)), None),
        ("shift_a", 4, range(c - keep(0.8), c), None),
        ("shift_b", 4, None, np.linspace(2.0, 0.25, c)),
        ("extreme", 5, range(0, keep(0.6)), None),
    ]
    targets = {}
    for i, (name, sev, subset, weights) in enumerate(plan):
        sh = severity_shift(sev, dim, seed=seed + 101 * (i + 1),
                            label_subset=None if subset is None else list(subset),
                            prior_weights=weights, name=name)
        targets[name] = apply_shift(source, sh)
    return BenchSuite(source=source, targets=targets, validation="validation", extreme="extreme")
