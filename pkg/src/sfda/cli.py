"""Command-line harness: ``sfda generate | train-source | adapt | grid | evaluate | slice | report``.

Configs are ``key = value`` text files (values parsed as JSON when they
parse, dotted keys nest) or JSON documents. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bench, methods, slicer
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import evaluate as metric_report, report_json
from .nn import MicroNet, forward, predict_probs

log = logging.getLogger("sfda")

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- config --------------------------------------------------------------------

def _parse_value(raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text):
    """``key = value`` lines into a nested dict; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        line = line.split(" #", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {p!r} is both a value and a section")
        node[leaf] = _parse_value(value)
    return out


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config_text(text)


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    task: str = "multi"                  # bench label mode: "multi" or "single"
    bench_seed: int = 0
    n_classes: int = 10
    dim: int = 16
    n: int = 2000                        # samples per target domain
    split_ratio: float = 0.75
    split_seed: int = 0
    data_seed: int = 11
    seeds: tuple = (0,)
    domains: tuple = None                # None: every non-validation domain
    method: methods.MethodConfig = field(default_factory=methods.MethodConfig)
    grid: dict = None                    # None: the method's default grid
    grid_subset: int = None
    grid_seed: int = 0
    source: dict = field(default_factory=lambda: dict(
        n=3000, hidden=[32, 32], epochs=40, lr=0.1, seed=0, dropout=0.2))

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.task not in ("multi", "single"):
            raise ConfigError(f"task must be 'multi' or 'single', got {self.task!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie strictly between 0 and 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "method" in d:
            m = d["method"]
            d["method"] = methods.MethodConfig.from_dict({"method": m} if isinstance(m, str) else m)
        if "seeds" in d:
            seeds = d["seeds"]
            d["seeds"] = tuple(int(s) for s in (seeds if isinstance(seeds, list) else [seeds]))
        if d.get("domains") is not None:
            d["domains"] = tuple(d["domains"])
        if "source" in d:
            d["source"] = dict(cls().source, **d["source"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        d = asdict(self)
        d["method"] = asdict(self.method)
        d["seeds"] = list(self.seeds)
        d["domains"] = None if self.domains is None else list(self.domains)
        return d


def load_experiment(path):
    return ExperimentConfig.from_dict(read_config_file(path)) if path else ExperimentConfig()


# -- file helpers --------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _claim(path, force):
    """Refuse to write into an existing, non-empty output unless ``force``."""
    path = Path(path)
    occupied = path.exists() and (path.is_file() or any(path.iterdir()))
    if occupied and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


# -- data layout -----------------------------------------------------------------

def _manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{data_dir} has no manifest.json; run 'generate' first")
    return json.loads(path.read_text())


def _load_spec(data_dir, domain):
    path = Path(data_dir) / domain / "spec.json"
    if not path.exists():
        raise ConfigError(f"missing domain spec {path}")
    return bench.DomainSpec.from_dict(json.loads(path.read_text()))


def load_adapt_features(data_dir, domain):
    """Adaptation inputs only; labels of the adaptation split are never read."""
    path = Path(data_dir) / domain / "adapt" / "features.csv"
    if not path.exists():
        raise DataError(f"missing {path}")
    return np.loadtxt(path, delimiter=",", ndmin=2)


def load_split(data_dir, domain, split):
    return bench.load_dataset(Path(data_dir) / domain / split)


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model checkpoint {path} does not exist")
    meta_path = path.with_suffix(".meta.json")
    if not meta_path.exists():
        raise ConfigError(f"missing model sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    return methods.SourceModel(net=MicroNet.load(path), task=meta["task"],
                               n_classes=meta["n_classes"])


def save_model(path, src, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    src.net.save(path)
    write_json(path.with_suffix(".meta.json"),
               dict({"task": src.task, "n_classes": src.n_classes}, **(extra or {})))


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg, out, force=False):
    """Write the source spec and every target domain's adapt/test split."""
    _claim(out, force)
    out = Path(out)
    suite = bench.bench_suite(cfg.task, n_classes=cfg.n_classes, dim=cfg.dim, seed=cfg.bench_seed)
    write_json(out / "source" / "spec.json", suite.source.to_dict())
    names = list(suite.targets)
    for i, name in enumerate(names):
        spec = suite.targets[name]
        write_json(out / name / "spec.json", spec.to_dict())
        ds = bench.generate_domain(spec, cfg.n, cfg.data_seed + 1000 * i)
        adapt, test = bench.split_adapt_test(ds, cfg.split_ratio, cfg.split_seed)
        adapt.provenance["split"], test.provenance["split"] = "adapt", "test"
        bench.save_dataset(adapt, out / name / "adapt")
        bench.save_dataset(test, out / name / "test")
    write_json(out / "manifest.json", {
        "version": CONFIG_VERSION, "task": suite.source.task, "domains": names,
        "validation": suite.validation, "extreme": suite.extreme, "config": cfg.to_dict()})
    return out


def cmd_train_source(cfg, data_dir, out, force=False):
    _claim(out, force)
    spec = _load_spec(data_dir, "source")
    s = cfg.source
    src = bench.train_source(spec, s["n"], hidden=tuple(s["hidden"]), epochs=s["epochs"],
                             seed=s["seed"], lr=s["lr"], dropout=s["dropout"])
    save_model(out, src, {"spec_hash": spec.spec_hash()})
    return src


def _test_domains(cfg, manifest):
    validation = manifest["validation"]
    domains = list(cfg.domains) if cfg.domains is not None else [
        d for d in manifest["domains"] if d != validation]
    for d in domains:
        if d not in manifest["domains"]:
            raise ConfigError(f"unknown domain {d!r}; available: {manifest['domains']}")
        if d == validation:
            raise ConfigError(f"{d!r} is the held-out validation domain and cannot be "
                              "used for test reporting")
    return domains


SUMMARY_METRICS = ("map", "cmap", "top1", "mean_max_conf")


def _summarise(rows):
    """Mean and std over seeds of the final-epoch rows, per (method, hash, domain)."""
    final = {}
    for r in rows:
        key = (r["method"], r["config_hash"], r["domain"], r["split"], r["seed"])
        if key not in final or int(r["epoch"]) > int(final[key]["epoch"]):
            final[key] = r
    groups = {}
    for (m, h, d, sp, _), r in final.items():
        groups.setdefault((m, h, d, sp), []).append(r)
    out = []
    for (m, h, d, sp), rs in sorted(groups.items()):
        rec = {"method": m, "config_hash": h, "domain": d, "split": sp, "n_seeds": len(rs)}
        for k in SUMMARY_METRICS:
            vals = np.array([float(r[k]) for r in rs])
            ok = vals[~np.isnan(vals)]
            rec[f"{k}_mean"] = float(ok.mean()) if ok.size else math.nan
            rec[f"{k}_std"] = float(ok.std()) if ok.size else math.nan
        out.append(rec)
    return out


SUMMARY_COLUMNS = ("method", "config_hash", "domain", "split", "n_seeds") + tuple(
    f"{k}_{s}" for k in SUMMARY_METRICS for s in ("mean", "std"))


def cmd_adapt(cfg, data_dir, model, out, force=False):
    """Run ``cfg.method`` on each test domain and seed; write results, trajectories, summary."""
    _claim(out, force)
    out = Path(out)
    manifest = _manifest(data_dir)
    src = load_model(model)
    rows = []
    for domain in _test_domains(cfg, manifest):
        adapt_x = load_adapt_features(data_dir, domain)
        test = load_split(data_dir, domain, "test")
        evaluate = methods.make_evaluator(test.features, test.labels, src.task)
        for seed in cfg.seeds:
            run_cfg = replace(cfg.method, seed=int(seed))
            net, traj = methods.adapt(src, adapt_x, run_cfg, evaluate)
            seed_rows = methods.trajectory_rows(run_cfg, traj, domain, "test")
            write_csv(out / "trajectories" / domain / f"seed_{seed}.csv",
                      methods.RESULT_COLUMNS, seed_rows)
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            net.save(out / "checkpoints" / f"{domain}_seed_{seed}.json")
            rows.extend(seed_rows)
    write_csv(out / "results.csv", methods.RESULT_COLUMNS, rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, _summarise(rows))
    write_json(out / "config.json", dict(cfg.to_dict(), config_hash=cfg.method.config_hash()))
    return rows


def cmd_grid(cfg, data_dir, model, out, force=False):
    """Grid search on the held-out validation domain only."""
    _claim(out, force)
    out = Path(out)
    manifest = _manifest(data_dir)
    src = load_model(model)
    grid = cfg.grid if cfg.grid is not None else methods.DEFAULT_GRIDS[cfg.method.method]
    configs = methods.expand_grid(grid, base=cfg.method, subset=cfg.grid_subset,
                                  seed=cfg.grid_seed)
    val = manifest["validation"]
    test = load_split(data_dir, val, "test")
    result = methods.run_grid(src, configs, (load_adapt_features(data_dir, val), test.features,
                                             test.labels), seeds=cfg.seeds, domain=val)
    write_csv(out / "grid_results.csv", methods.RESULT_COLUMNS, result.rows)
    write_json(out / "best_config.json", {
        "config": asdict(result.best), "config_hash": result.best.config_hash(),
        "score": result.scores[result.best.config_hash()], "n_configs": len(configs),
        "domain": val})
    return result


def cmd_evaluate(data_dir, model, domain, split="test", out=None):
    src = load_model(model)
    ds = load_split(data_dir, domain, split)
    probs = predict_probs(forward(src.net, ds.features).logits, src.task)
    report = metric_report(probs, ds.labels, src.task)
    if out:
        Path(out).write_text(report_json(report) + "\n")
    return report


def cmd_slice(wav, mode, boxes, out, force=False):
    _claim(out, force)
    wave = slicer.read_wav(wav)
    slices = slicer.extract_slices(wave, mode)
    if boxes:
        slices = slicer.label_windows(slices, slicer.read_boxes(boxes))
    rows = [{"file": Path(wav).name, "start_s": s.start, "dur_s": s.duration,
             "labels": ";".join(sorted(s.labels))} for s in slices]
    write_csv(out, ("file", "start_s", "dur_s", "labels"), rows)
    return rows


TRAJ_COLUMNS = ("domain", "method", "config_hash", "epoch", "n_seeds") + tuple(
    f"{k}_mean" for k in SUMMARY_METRICS)


def cmd_report(results_dir, out, force=False):
    """Aggregate every ``results.csv`` below ``results_dir`` into summary tables."""
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise ConfigError(f"{results_dir} is not a directory")
    files = sorted(results_dir.rglob("results.csv"))
    rows = [r for f in files for r in read_csv(f)]
    if not rows:
        log.warning("no results found under %s; the report is empty", results_dir)
    _claim(out, force)
    out = Path(out)
    per_domain = _summarise(rows)
    write_csv(out / "summary_by_domain.csv", SUMMARY_COLUMNS, per_domain)

    by_method = {}
    for r in per_domain:
        by_method.setdefault((r["method"], r["config_hash"]), []).append(r)
    method_rows = []
    for (m, h), rs in sorted(by_method.items()):
        rec = {"method": m, "config_hash": h, "n_domains": len(rs)}
        for k in SUMMARY_METRICS:
            vals = np.array([r[f"{k}_mean"] for r in rs], dtype=float)
            rec[f"{k}_mean"] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else math.nan
        method_rows.append(rec)
    write_csv(out / "summary_by_method.csv",
              ("method", "config_hash", "n_domains") + tuple(f"{k}_mean" for k in SUMMARY_METRICS),
              method_rows)

    # a rerun of the same (config, seed) replaces, rather than duplicates, its rows
    unique = {(r["domain"], r["method"], r["config_hash"], int(r["epoch"]), r["seed"]): r
              for r in rows}
    traj = {}
    for (d, m, h, e, _), r in unique.items():
        traj.setdefault((d, m, h, e), []).append(r)
    traj_rows = []
    for (d, m, h, e), rs in sorted(traj.items()):
        rec = {"domain": d, "method": m, "config_hash": h, "epoch": e, "n_seeds": len(rs)}
        for k in SUMMARY_METRICS:
            vals = np.array([float(x[k]) for x in rs])
            rec[f"{k}_mean"] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else math.nan
        traj_rows.append(rec)
    write_csv(out / "trajectories.csv", TRAJ_COLUMNS, traj_rows)
    return per_domain


# -- entry point -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sfda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic source and target domains")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train-source", help="train the source model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")

    for name, helptext in (("adapt", "adapt on every test domain and seed"),
                           ("grid", "hyperparameter search on the validation domain")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--config")
        a.add_argument("--data", required=True)
        a.add_argument("--model", required=True)
        a.add_argument("--out", required=True)
        a.add_argument("--force", action="store_true")

    e = sub.add_parser("evaluate", help="metric report of a model on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--domain", required=True)
    e.add_argument("--split", default="test", choices=("adapt", "test"))
    e.add_argument("--out")

    s = sub.add_parser("slice", help="cut a WAV recording into peak-centred windows")
    s.add_argument("wav")
    s.add_argument("--mode", default="source", choices=sorted(slicer.MODES))
    s.add_argument("--boxes")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    r = sub.add_parser("report", help="summarise results directories")
    r.add_argument("results")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    return p


def run(args):
    if args.command == "generate":
        cmd_generate(load_experiment(args.config), args.out, args.force)
    elif args.command == "train-source":
        cmd_train_source(load_experiment(args.config), args.data, args.out, args.force)
    elif args.command == "adapt":
        cmd_adapt(load_experiment(args.config), args.data, args.model, args.out, args.force)
    elif args.command == "grid":
        res = cmd_grid(load_experiment(args.config), args.data, args.model, args.out, args.force)
        print(json.dumps({"best": res.best.config_hash(),
                          "score": res.scores[res.best.config_hash()]}))
    elif args.command == "evaluate":
        print(report_json(cmd_evaluate(args.data, args.model, args.domain, args.split, args.out)))
    elif args.command == "slice":
        cmd_slice(args.wav, args.mode, args.boxes, args.out, args.force)
    elif args.command == "report":
        cmd_report(args.results, args.out, args.force)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
