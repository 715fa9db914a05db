"""Declarative experiment runner: family x dataset x regime x seeds.

Configs are flat ``key = value`` text files. ``include = name`` pulls in
another file first (looked up next to the including file, then among the
packaged defaults in ``susl/configs``); later keys override earlier ones.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from .distributions import LikelihoodSpec
from .models import ClassPrior, ModelSpec, ParamStore, load_params
from .training import TrainConfig, default_alpha, train, write_manifest

log = logging.getLogger(__name__)

DATASETS = ("mnist", "fashion-mnist", "har", "synthetic")


class ConfigError(ValueError):
    pass


class IncompatibleRunsError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    family: str = "gm-dgm"
    regime: str = "semi-unsupervised"
    n_aug: int = 40
    n_clusters: int = 0
    label_fraction: float = 0.2
    labelled_classes: str = ""
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    output_dir: str = "runs"
    name: str = ""
    # model
    z_dim: int = 5
    hidden_units: int = 200
    hidden_layers: int = 2
    likelihood: str = "bernoulli"
    sigma: float = 0.01
    alpha: float = -1.0
    init_std: float = 0.001
    prior_init_std: float = -1.0  # negative: same as init_std
    activation: str = "relu"
    temperature: float = 0.5
    # training
    epochs: int = 400
    batch_size: int = 64
    lr: float = 0.001
    eval_every: int = 0
    checkpoint_every: int = 0
    workers: int = 1
    # data
    data_dir: str = ""
    train_subset: int = 0
    subset_seed: int = 0
    std_threshold: float = 0.1
    standardize: bool = False
    har_train_features: str = ""
    har_train_labels: str = ""
    har_test_features: str = ""
    har_test_labels: str = ""
    har_delimiter: str = ""
    har_label_offset: int = 1
    synthetic_n_per_class: int = 250
    synthetic_n_test_per_class: int = 250
    synthetic_classes: int = 4
    synthetic_dim: int = 8
    synthetic_separation: float = 4.0
    synthetic_noise: float = 0.5
    grid_rows: int = 10
    confident_n: int = 10

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.regime not in D.REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.family not in ("ssvae", "gm-dgm"):
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _FIELD_TYPES[key]
    raw = raw.strip()
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    if t == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if t == "list":
        return [int(s) for s in raw.replace(",", " ").split()]
    return raw


def _locate(name: str, base: Path | None) -> Path | str:
    if base is not None and (base / name).exists():
        return base / name
    if Path(name).exists():
        return Path(name)
    stem = name if name.endswith(".cfg") else name + ".cfg"
    res = resources.files("susl") / "configs" / stem
    if res.is_file():
        return res
    raise ConfigError(f"cannot find included config {name!r}")


def read_config_text(text: str, base: Path | None = None, _depth=0) -> dict:
    if _depth > 8:
        raise ConfigError("include nesting too deep")
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "include":
            src = _locate(value, base)
            sub_base = src.parent if isinstance(src, Path) else None
            out.update(read_config_text(src.read_text(), sub_base, _depth + 1))
        else:
            out[key] = _coerce(key, value)
    return out


def load_config(path, overrides: dict | list | None = None) -> ExperimentConfig:
    """Read a config file, or a packaged one by name (``synthetic``, ``mnist_desk``...)."""
    src = Path(path) if Path(path).exists() else _locate(str(path), None)
    base = src.parent if isinstance(src, Path) else Path.cwd()
    values = read_config_text(src.read_text(), src.parent if isinstance(src, Path) else None)
    if isinstance(overrides, list):
        overrides = read_config_text("\n".join(overrides), base)
    values.update(overrides or {})
    return ExperimentConfig(**values)


def config_from_text(text: str, **overrides) -> ExperimentConfig:
    values = read_config_text(text)
    values.update(overrides)
    return ExperimentConfig(**values)


# --- data assembly ---------------------------------------------------------------


@dataclass
class PreparedData:
    train: D.LabeledDataset
    test: D.LabeledDataset
    preprocess: D.PreprocessSpec


def load_datasets(cfg: ExperimentConfig) -> tuple:
    """Raw (train, test) for the configured dataset."""
    if cfg.dataset in ("mnist", "fashion-mnist"):
        root = Path(cfg.data_dir or f"data/{cfg.dataset}")
        train = D.load_mnist_dir(root, "train", cfg.dataset)
        test = D.load_mnist_dir(root, "test", cfg.dataset)
    elif cfg.dataset == "har":
        paths = [cfg.har_train_features, cfg.har_train_labels, cfg.har_test_features, cfg.har_test_labels]
        if not all(paths):
            raise FileNotFoundError("har needs har_train_features/labels and har_test_features/labels paths")
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing HAR files {missing}; point the har_* keys at precomputed feature "
                                    "matrices (one row per window) and integer label files")
        delim = cfg.har_delimiter or None
        train = D.load_tabular(paths[0], paths[1], delim, label_offset=cfg.har_label_offset, name="har")
        test = D.load_tabular(paths[2], paths[3], delim, label_offset=cfg.har_label_offset, n_gt=train.n_gt,
                              name="har")
    else:
        kw = dict(n_classes=cfg.synthetic_classes, dim=cfg.synthetic_dim,
                  separation=cfg.synthetic_separation, noise=cfg.synthetic_noise)
        train = D.make_blobs(cfg.synthetic_n_per_class, seed=cfg.subset_seed, **kw)
        test = D.make_blobs(cfg.synthetic_n_test_per_class, seed=cfg.subset_seed + 10_000, **kw)
    if cfg.train_subset and cfg.train_subset < len(train):
        idx = np.sort(np.random.default_rng(cfg.subset_seed).permutation(len(train))[: cfg.train_subset])
        train = train.subset(idx)
    return train, test


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    train, test = load_datasets(cfg)
    if cfg.standardize:
        pp = D.fit_preprocess(train, cfg.std_threshold, binarize_dynamic=False, standardize=True)
    else:
        pp = D.fit_preprocess(train, cfg.std_threshold, binarize_dynamic=cfg.likelihood == "bernoulli")
    return PreparedData(D.apply_preprocess(train, pp), D.apply_preprocess(test, pp), pp)


def label_space(cfg: ExperimentConfig, n_gt: int, labelled_classes: tuple) -> tuple:
    """(K, prior) for a regime: uniform for ss/us/accident, split prior for semi-unsupervised."""
    n_l = len(labelled_classes)
    if cfg.regime == "semi-unsupervised":
        return n_l + cfg.n_aug, D.build_class_prior(n_l, cfg.n_aug)
    if cfg.regime == "unsupervised":
        K = cfg.n_clusters or (math.ceil(n_gt / 2) + cfg.n_aug)
        return K, ClassPrior.uniform(K)
    # semi-supervised and the accidental case believe the labelled classes are all there is
    K = cfg.n_clusters or n_l
    return K, D.build_class_prior(K, 0)


def _labelled_classes(cfg: ExperimentConfig, n_gt: int):
    if not cfg.labelled_classes:
        return None
    if cfg.labelled_classes == "half":
        return tuple(range(math.ceil(n_gt / 2)))
    return tuple(int(s) for s in cfg.labelled_classes.replace(",", " ").split())


def build_spec(cfg: ExperimentConfig, x_dim: int, K: int, prior: ClassPrior, alpha: float) -> ModelSpec:
    lik = LikelihoodSpec("bernoulli") if cfg.likelihood == "bernoulli" else LikelihoodSpec("gaussian", cfg.sigma)
    return ModelSpec(cfg.family, x_dim, cfg.z_dim, K, cfg.hidden_units, cfg.hidden_layers, lik, alpha, prior,
                     cfg.activation, cfg.temperature, "analytic", cfg.init_std,
                     cfg.prior_init_std if cfg.prior_init_std >= 0 else None)


# --- single run ------------------------------------------------------------------


def run_seed(cfg: ExperimentConfig, seed: int, root: Path, prepared: PreparedData | None = None) -> dict:
    """Train and evaluate one seed; every artefact goes under ``root/seed_<seed>``."""
    t0 = time.perf_counter()
    prepared = prepared or prepare_data(cfg)
    out = root / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, pp = prepared.train, prepared.test, prepared.preprocess

    regime = D.build_regime(train_ds, cfg.regime, cfg.label_fraction, seed,
                            _labelled_classes(cfg, train_ds.n_gt))
    K, prior = label_space(cfg, train_ds.n_gt, regime.labelled_classes)
    alpha = cfg.alpha if cfg.alpha >= 0 else default_alpha(regime.n_total, len(regime.y_labelled))
    spec = build_spec(cfg, train_ds.features.shape[1], K, prior, alpha)
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, seed, cfg.eval_every,
                       binarize=cfg.likelihood == "bernoulli", checkpoint_every=cfg.checkpoint_every)

    D.save_manifest(out / "regime.json", regime)
    manifest = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": seed,
        "alpha": alpha,
        "label_space": K,
        "regime_hash": regime.manifest_hash(),
        "preprocess": pp.to_dict(),
        "model_spec": spec.to_dict(),
    }
    manifest["manifest_hash"] = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:16]
    write_manifest(out / "manifest.json", manifest)

    def eval_fn(store, epoch):
        pred, _ = E.predict_clusters(store, test_ds.features)
        return E.cluster_accuracy(pred, test_ds.labels, K, test_ds.n_gt)[0]

    store, runlog = train(spec, regime, tcfg, checkpoint_dir=out / "checkpoints", eval_fn=eval_fn,
                          extra_meta={"preprocess": pp.to_dict(), "experiment": cfg.to_dict(),
                                      "manifest_hash": manifest["manifest_hash"]})
    runlog.write(out / "runlog.tsv")

    meta = {"manifest_hash": manifest["manifest_hash"], "seed": seed, "family": cfg.family,
            "dataset": cfg.dataset, "regime": cfg.regime}
    report = E.evaluate(store, test_ds.features, test_ds.labels, test_ds.n_gt, regime.labelled_classes, meta)
    report.write(out, "eval")
    reports = {"full": report.to_dict()}
    if set(regime.labelled_classes) != set(range(test_ds.n_gt)) and regime.labelled_classes:
        # test subset restricted to the labelled classes (accidental-regime protocol)
        sub = np.isin(test_ds.labels, regime.labelled_classes)
        rep_l = E.evaluate(store, test_ds.features[sub], test_ds.labels[sub], test_ds.n_gt,
                           regime.labelled_classes, {**meta, "test_subset": "labelled_classes"})
        rep_l.write(out, "eval_labelled_subset")
        reports["labelled_subset"] = rep_l.to_dict()

    write_figure_data(store, test_ds, pp, out, cfg, seed)
    invariants = check_run_invariants(store, regime, report, train_ds)
    status = {"ok": all(invariants.values()), "invariants": invariants,
              "seconds": time.perf_counter() - t0, "manifest_hash": manifest["manifest_hash"]}
    (out / "status.json").write_text(json.dumps(status, indent=1, sort_keys=True))
    return {"seed": seed, "dir": str(out), "reports": reports, "status": status}


def write_figure_data(store: ParamStore, test_ds: D.LabeledDataset, pp: D.PreprocessSpec, out: Path,
                      cfg: ExperimentConfig, seed: int) -> None:
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    tag = f"{cfg.name or cfg.digest()}_s{seed}_e{cfg.epochs}"
    rng = np.random.default_rng([seed, 7])
    grid = E.generation_grid(store, cfg.grid_rows, rng)
    np.save(figs / f"grid_{tag}.npy", grid)
    conf = E.most_confident(store, test_ds.features, cfg.confident_n)
    (figs / f"confident_{tag}.json").write_text(json.dumps(conf))
    lat = E.export_latents(store, test_ds.features, "argmax")
    np.savetxt(figs / f"latents_{tag}.tsv", np.column_stack([lat, test_ds.labels]), delimiter="\t",
               header="\t".join([f"z{i}" for i in range(lat.shape[1])] + ["label"]), comments="",
               fmt=["%.17g"] * lat.shape[1] + ["%d"])
    if pp.image_shape:
        restore = lambda x: D.restore_layout(x, pp)
        E.write_pgm(figs / f"grid_{tag}.pgm", E.grid_to_image(grid, restore, pp.image_shape))
        K = store.spec.y_dim
        panel = np.zeros((cfg.confident_n, K, test_ds.features.shape[1]))
        for k, idx in conf.items():
            panel[: len(idx), k] = test_ds.features[idx]
        E.write_pgm(figs / f"confident_{tag}.pgm", E.grid_to_image(panel, restore, pp.image_shape))


def check_run_invariants(store: ParamStore, regime: D.RegimeDataset, report: E.EvalReport,
                         train_ds: D.LabeledDataset) -> dict:
    li, ui = set(regime.labelled_index.tolist()), set(regime.unlabelled_index.tolist())
    folded = E.assigned_confusion(report.confusion, report.assignment)
    checks = {
        "params_finite": store.all_finite(),
        "partition_disjoint": not (li & ui),
        "labelled_classes_only_in_labelled": bool(np.isin(regime.y_labelled, regime.labelled_classes).all()),
        "confusion_total": int(report.confusion.sum()) == report.n_test,
        "acc_matches_confusion_trace": abs(np.trace(folded) / report.n_test - report.acc) < 1e-12,
    }
    if regime.regime != "semi-supervised":
        checks["partition_complete"] = len(li) + len(ui) == len(train_ds)
    return {k: bool(v) for k, v in checks.items()}


# --- orchestration ----------------------------------------------------------------


def _run_seed_safe(args):
    cfg, seed, root = args
    try:
        return run_seed(cfg, seed, Path(root))
    except Exception as exc:  # one seed failing must not sink the others
        log.error("seed %s failed: %s", seed, exc)
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}


def run_experiment(cfg: ExperimentConfig, root=None) -> dict:
    """Run every seed, then write ``summary.tsv``/``summary.json`` under the run root."""
    root = Path(root or Path(cfg.output_dir) / (cfg.name or f"{cfg.family}_{cfg.dataset}_{cfg.regime}"))
    root.mkdir(parents=True, exist_ok=True)
    (root / "experiment.cfg").write_text("\n".join(f"{k} = {_fmt(v)}" for k, v in cfg.to_dict().items()) + "\n")
    jobs = [(cfg, s, str(root)) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_run_seed_safe, jobs))
    else:
        prepared = prepare_data(cfg)
        results = []
        for c, s, r in jobs:
            try:
                results.append(run_seed(c, s, Path(r), prepared))
            except Exception as exc:
                log.error("seed %s failed: %s", s, exc)
                results.append({"seed": s, "error": f"{type(exc).__name__}: {exc}"})
    table = summarize([root])
    ok = all("error" not in r and r["status"]["ok"] for r in results)
    return {"root": str(root), "results": results, "summary": table, "ok": ok}


def _fmt(v):
    if isinstance(v, list):
        return " ".join(map(str, v))
    return str(v).lower() if isinstance(v, bool) else str(v)


_COMPARE_KEYS = ("n_aug", "n_clusters", "label_fraction", "labelled_classes", "z_dim", "hidden_units",
                 "hidden_layers", "likelihood", "epochs", "batch_size", "lr", "train_subset", "init_std",
                 "prior_init_std")


def _find_seed_dirs(paths) -> list:
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            out.append(p)
        else:
            out.extend(sorted(d for d in p.glob("seed_*") if d.is_dir()))
    return out


def _mean_sd(values):
    if not values:
        return None, None
    m = float(statistics.fmean(values))
    sd = float(statistics.stdev(values)) if len(values) > 1 else None
    return m, sd


def summarize(run_dirs, out_path=None) -> list:
    """Mean and sample SD of ACC per (family, dataset, regime) across seed directories."""
    groups: dict = {}
    for d in _find_seed_dirs(run_dirs):
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = manifest["config"]
        key = (cfg["family"], cfg["dataset"], cfg["regime"])
        evf = d / "eval.json"
        g = groups.setdefault(key, {"settings": None, "runs": [], "missing": []})
        settings = {k: cfg.get(k) for k in _COMPARE_KEYS}
        if g["settings"] is None:
            g["settings"] = settings
        elif g["settings"] != settings:
            diff = {k for k in settings if settings[k] != g["settings"][k]}
            raise IncompatibleRunsError(f"runs for {key} differ in {sorted(diff)}; summarise them separately")
        if not evf.exists():
            g["missing"].append(manifest["seed"])
            continue
        rep = json.loads(evf.read_text())
        sub = d / "eval_labelled_subset.json"
        rep["labelled_subset_acc"] = json.loads(sub.read_text())["acc"] if sub.exists() else None
        rep["seed"] = manifest["seed"]
        g["runs"].append(rep)

    rows = []
    for (family, dataset, regime), g in sorted(groups.items()):
        runs = g["runs"]
        row = {"family": family, "dataset": dataset, "regime": regime, "n_runs": len(runs),
               "seeds": [r["seed"] for r in runs], "missing_seeds": g["missing"]}
        for col, src in (("acc", "acc"), ("accuracy", "accuracy"), ("acc_labelled", "acc_labelled_classes"),
                         ("acc_unlabelled", "acc_unlabelled_classes"), ("acc_labelled_subset", "labelled_subset_acc")):
            vals = [r[src] for r in runs if r.get(src) is not None]
            row[col], row[col + "_sd"] = _mean_sd(vals)
        rows.append(row)
    if out_path is not None:
        write_summary(rows, out_path)
    else:
        for p in map(Path, run_dirs):
            if not (p / "manifest.json").exists() and p.is_dir():
                write_summary(rows, p / "summary")
    return rows


def write_summary(rows, stem) -> None:
    stem = Path(stem)
    cols = ["family", "dataset", "regime", "n_runs", "acc", "acc_sd", "accuracy", "accuracy_sd", "acc_labelled",
            "acc_labelled_sd", "acc_unlabelled", "acc_unlabelled_sd", "acc_labelled_subset",
            "acc_labelled_subset_sd", "missing_seeds"]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                               for c in cols))
    stem.with_suffix(".tsv").write_text("\n".join(lines) + "\n")
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=1))


# --- checkpoint-based verbs ------------------------------------------------------


def load_run_checkpoint(path):
    """(store, preprocess spec, experiment config) from a checkpoint written by :func:`run_seed`."""
    store, seed, _, meta = load_params(path)
    pp = D.PreprocessSpec.from_dict(meta["preprocess"]) if "preprocess" in meta else None
    cfg = ExperimentConfig(**meta["experiment"]) if "experiment" in meta else None
    return store, pp, cfg, seed


def eval_checkpoint(checkpoint, dataset_cfg: ExperimentConfig | None = None, out_dir=None) -> E.EvalReport:
    store, pp, cfg, _ = load_run_checkpoint(checkpoint)
    cfg = dataset_cfg or cfg
    _, test = load_datasets(cfg)
    test = D.apply_preprocess(test, pp)
    lc = D.labelled_classes_for(cfg.regime, test.n_gt)
    lc = _labelled_classes(cfg, test.n_gt) or lc
    report = E.evaluate(store, test.features, test.labels, test.n_gt, lc, {"checkpoint": str(checkpoint)})
    if out_dir is not None:
        report.write(out_dir, "eval")
    return report
