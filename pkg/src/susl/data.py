"""Dataset loading, preprocessing and label-regime construction."""
from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .models import ClassPrior

REGIMES = ("unsupervised", "semi-supervised", "sus-accident", "semi-unsupervised")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class TabularParseError(DataError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_gt: int
    name: str = ""
    image_shape: tuple | None = None
    preprocessed: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if np.isnan(self.features).any():
            raise DataError("features contain NaN")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_gt):
            raise DataError(f"labels must lie in 0..{self.n_gt - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_gt,
                              name or self.name, self.image_shape, self.preprocessed)


# --- IDX -------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = math.prod(dims)
    if len(buf) - header < n:
        raise IdxTruncatedError(f"{path}: header promises {n} bytes, found {len(buf) - header}")
    if len(buf) - header > n:
        raise IdxCountMismatchError(f"{path}: {len(buf) - header - n} trailing bytes after {dims}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data in IDX format (magic ``0x08`` type byte, big-endian dims)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(head + a.tobytes())


def load_idx_images(images_path, labels_path, name="idx", n_gt=None) -> LabeledDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if n_gt is None:
        n_gt = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(images.reshape(len(images), -1) / 255.0, labels.astype(np.int64),
                          n_gt, name, tuple(images.shape[1:]))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

FETCH_HINT = (
    "expected IDX files {files} in {root}. Fetch MNIST from http://yann.lecun.com/exdb/mnist/ "
    "or Fashion-MNIST from https://github.com/zalandoresearch/fashion-mnist (gzipped files are fine)."
)


def _find(root: Path, stem: str) -> Path | None:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / cand).exists():
            return root / cand
    return None


def load_mnist_dir(root, split="train", name="mnist") -> LabeledDataset:
    """Load a standard MNIST/Fashion-MNIST IDX pair from ``root``."""
    root = Path(root)
    img, lab = (_find(root, s) for s in MNIST_FILES[split])
    if img is None or lab is None:
        raise FileNotFoundError(FETCH_HINT.format(files=MNIST_FILES[split], root=root))
    return load_idx_images(img, lab, name, n_gt=10)


# --- tabular -----------------------------------------------------------------


def _parse_rows(path, delimiter):
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(delimiter) if delimiter else line.split()
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise TabularParseError(f"{path}: non-numeric cell in row {i}") from None
            if len(rows[-1]) != len(rows[0]):
                raise TabularParseError(f"{path}: row {i} has {len(rows[-1])} cells, expected {len(rows[0])}")
    return np.array(rows, dtype=np.float64)


def load_tabular(features_path, labels_path=None, delimiter=None, label_column=None,
                 label_offset=0, n_gt=None, name="tabular") -> LabeledDataset:
    """Load delimited numeric text; labels from a separate file or a column of the features file.

    ``label_offset`` is subtracted from raw labels (UCI HAR labels start at 1).
    Standardisation is a separate step, see :func:`fit_standardizer`.
    """
    feats = _parse_rows(features_path, delimiter)
    if labels_path is not None:
        labels = _parse_rows(labels_path, delimiter)
        if labels.shape[1] != 1:
            raise TabularParseError(f"{labels_path}: expected one label per row")
        labels = labels[:, 0]
        if len(labels) != len(feats):
            raise TabularParseError(f"{len(feats)} feature rows but {len(labels)} labels")
    elif label_column is not None:
        labels = feats[:, label_column]
        feats = np.delete(feats, label_column, axis=1)
    else:
        raise ConfigurationError("need labels_path or label_column")
    if np.any(labels != np.round(labels)):
        raise TabularParseError("labels must be integers")
    labels = labels.astype(np.int64) - label_offset
    if n_gt is None:
        n_gt = int(labels.max()) + 1
    return LabeledDataset(feats, labels, n_gt, name)


# --- preprocessing -----------------------------------------------------------


@dataclass
class PreprocessSpec:
    std_threshold: float = 0.1
    binarize_dynamic: bool = True
    kept_dims: list = field(default_factory=list)
    source_dim: int = 0
    mean: list | None = None
    scale: list | None = None
    image_shape: tuple | None = None

    def to_dict(self):
        d = dict(self.__dict__)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("image_shape"):
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


def fit_preprocess(train: LabeledDataset, std_threshold=0.1, binarize_dynamic=True,
                   standardize=False) -> PreprocessSpec:
    """Keep dimensions whose training std exceeds the threshold; optionally z-score them."""
    if std_threshold < 0:
        raise ConfigurationError("std threshold must be nonnegative")
    std = train.features.std(axis=0)
    kept = np.flatnonzero(std > std_threshold) if std_threshold > 0 else np.arange(train.features.shape[1])
    if kept.size == 0:
        raise ConfigurationError(f"no dimension has std above {std_threshold}")
    spec = PreprocessSpec(std_threshold, binarize_dynamic, kept.tolist(), train.features.shape[1],
                          image_shape=train.image_shape)
    if standardize:
        sub = train.features[:, kept]
        spec.mean = sub.mean(axis=0).tolist()
        s = sub.std(axis=0)
        spec.scale = np.where(s > 0, s, 1.0).tolist()
    return spec


def apply_preprocess(ds: LabeledDataset, spec: PreprocessSpec) -> LabeledDataset:
    """Idempotent: an already-reduced dataset is returned unchanged."""
    if ds.preprocessed:
        return ds
    if ds.features.shape[1] != spec.source_dim:
        raise DataError(f"dataset has {ds.features.shape[1]} dims, preprocess manifest expects {spec.source_dim}")
    x = ds.features[:, spec.kept_dims]
    if spec.mean is not None:
        x = (x - np.asarray(spec.mean)) / np.asarray(spec.scale)
    return LabeledDataset(x, ds.labels, ds.n_gt, ds.name, ds.image_shape, preprocessed=True)


def fit_standardizer(train: LabeledDataset) -> PreprocessSpec:
    """Per-feature zero mean / unit variance, no dimension dropping (tabular data)."""
    return fit_preprocess(train, std_threshold=0.0, binarize_dynamic=False, standardize=True)


def restore_layout(x: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Scatter reduced vectors back to the source layout; dropped dims become 0."""
    x = np.atleast_2d(x)
    out = np.zeros((len(x), spec.source_dim))
    out[:, spec.kept_dims] = x
    return out


def binarize_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size and (batch.min() < 0 or batch.max() > 1):
        raise DataError("binarisation needs entries in [0, 1]")
    return (rng.random(batch.shape) < batch).astype(np.float64)


# --- regimes -----------------------------------------------------------------


@dataclass
class RegimeDataset:
    x_labelled: np.ndarray
    y_labelled: np.ndarray
    x_unlabelled: np.ndarray
    regime: str
    labelled_classes: tuple
    label_fraction: float
    labelled_index: np.ndarray
    unlabelled_index: np.ndarray
    seed: int
    n_gt: int
    # kept for diagnostics only; never used by training
    unlabelled_truth: np.ndarray | None = None

    @property
    def n_total(self):
        return len(self.labelled_index) + len(self.unlabelled_index)

    def manifest(self) -> dict:
        return {
            "regime": self.regime,
            "seed": int(self.seed),
            "label_fraction": self.label_fraction,
            "labelled_classes": list(map(int, self.labelled_classes)),
            "n_gt": int(self.n_gt),
            "labelled_index": self.labelled_index.tolist(),
            "unlabelled_index": self.unlabelled_index.tolist(),
        }

    def manifest_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()[:16]


def labelled_classes_for(regime: str, n_gt: int) -> tuple:
    if regime == "unsupervised":
        return ()
    if regime == "semi-supervised":
        return tuple(range(n_gt))
    return tuple(range(math.ceil(n_gt / 2)))


def build_regime(ds: LabeledDataset, regime: str, label_fraction: float = 0.2, seed: int = 0,
                 labelled_classes=None) -> RegimeDataset:
    """Mask labels according to ``regime`` with per-class (stratified) sampling.

    semi-supervised:   labelled classes get ``label_fraction`` labels; the
                       unlabelled part holds only the rest of those classes.
    sus-accident / semi-unsupervised:
                       the first ceil(n_gt/2) classes are partially labelled,
                       every other example goes unlabelled.
    unsupervised:      nothing is labelled.
    """
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    if not 0 < label_fraction <= 1:
        raise ConfigurationError("label fraction must be in (0, 1]")
    default = labelled_classes_for(regime, ds.n_gt)
    classes = tuple(sorted(default if labelled_classes is None else labelled_classes))
    if regime == "unsupervised" and classes:
        raise ConfigurationError("unsupervised regime cannot have labelled classes")
    if regime != "unsupervised" and not classes:
        raise ConfigurationError(f"regime {regime} needs labelled classes")
    if any(c < 0 or c >= ds.n_gt for c in classes):
        raise ConfigurationError(f"labelled classes {classes} outside 0..{ds.n_gt - 1}")

    rng = np.random.default_rng(seed)
    lab_idx = []
    for c in classes:
        members = np.flatnonzero(ds.labels == c)
        n_keep = math.floor(label_fraction * len(members))
        if n_keep == 0 and len(members):
            n_keep = 1
        lab_idx.append(rng.permutation(members)[:n_keep])
    lab_idx = np.sort(np.concatenate(lab_idx)) if lab_idx else np.zeros(0, dtype=np.int64)

    pool = np.ones(len(ds), dtype=bool)
    pool[lab_idx] = False
    if regime == "semi-supervised":
        pool &= np.isin(ds.labels, classes)
    unl_idx = np.flatnonzero(pool)

    return RegimeDataset(
        x_labelled=ds.features[lab_idx], y_labelled=ds.labels[lab_idx],
        x_unlabelled=ds.features[unl_idx], regime=regime, labelled_classes=classes,
        label_fraction=label_fraction, labelled_index=lab_idx.astype(np.int64),
        unlabelled_index=unl_idx.astype(np.int64), seed=seed, n_gt=ds.n_gt,
        unlabelled_truth=ds.labels[unl_idx],
    )


def regime_from_manifest(ds: LabeledDataset, manifest: dict) -> RegimeDataset:
    """Rebuild a split exactly from its persisted manifest."""
    li = np.asarray(manifest["labelled_index"], dtype=np.int64)
    ui = np.asarray(manifest["unlabelled_index"], dtype=np.int64)
    return RegimeDataset(ds.features[li], ds.labels[li], ds.features[ui], manifest["regime"],
                         tuple(manifest["labelled_classes"]), manifest["label_fraction"], li, ui,
                         manifest["seed"], manifest["n_gt"], ds.labels[ui])


def save_manifest(path, regime: RegimeDataset) -> None:
    Path(path).write_text(json.dumps(regime.manifest(), sort_keys=True, indent=1))


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def build_class_prior(n_labelled: int, n_augmented: int = 0) -> ClassPrior:
    """Uniform over labelled classes, or half the mass on each side of the augmented split."""
    if n_labelled < 1 or n_augmented < 0:
        raise ConfigurationError("need n_labelled >= 1 and n_augmented >= 0")
    if n_augmented == 0:
        fr = [Fraction(1, n_labelled)] * n_labelled
    else:
        fr = [Fraction(1, 2 * n_labelled)] * n_labelled + [Fraction(1, 2 * n_augmented)] * n_augmented
    assert sum(fr) == 1
    # each entry is the nearest double to its rational value; renormalising would only add error
    return ClassPrior(tuple(float(f) for f in fr), n_labelled, n_augmented)


# --- synthetic fixture ---------------------------------------------------------


def make_blobs(n_per_class, n_classes=4, dim=8, separation=4.0, noise=0.5, seed=0, name="synthetic"):
    """Well-separated isotropic Gaussian classes; class c is centred on +separation along axis c."""
    rng = np.random.default_rng(seed)
    if n_classes > dim:
        raise ConfigurationError("need dim >= n_classes for axis-aligned centres")
    centres = np.zeros((n_classes, dim))
    centres[np.arange(n_classes), np.arange(n_classes)] = separation
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centres[labels] + noise * rng.standard_normal((len(labels), dim))
    perm = rng.permutation(len(labels))
    return LabeledDataset(x[perm], labels[perm], n_classes, name)
