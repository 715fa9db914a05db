"""Test-time metrics and diagnostic artefacts."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .distributions import ContractError, categorical_entropy
from .models import ModelSpec, ParamStore, classify, decode, encode

log = logging.getLogger(__name__)


@dataclass
class Assignment:
    """Cluster -> ground-truth class map (the rectangular assignment matrix in column form)."""

    mapping: np.ndarray
    empty_clusters: tuple = ()

    def matrix(self, T: int) -> np.ndarray:
        P = np.zeros((T, len(self.mapping)), dtype=np.int64)
        P[self.mapping, np.arange(len(self.mapping))] = 1
        return P


def confusion_matrix(predictions, truths, K: int, T: int) -> np.ndarray:
    """counts[t, k] = #{i : truth_i = t, prediction_i = k}."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    counts = np.zeros((T, K), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    return counts


def assigned_confusion(confusion: np.ndarray, assignment: Assignment) -> np.ndarray:
    """Fold cluster columns onto their assigned classes: T x T counts."""
    T = confusion.shape[0]
    return confusion @ assignment.matrix(T).T


def _validate(predictions, truths, K, T):
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.size == 0:
        raise ContractError("cluster accuracy of an empty test set is undefined")
    if predictions.shape != truths.shape:
        raise ContractError("predictions and truths differ in length")
    if predictions.min() < 0 or predictions.max() >= K or truths.min() < 0 or truths.max() >= T:
        raise ContractError(f"ids out of range (K={K}, T={T})")
    return predictions, truths


def cluster_accuracy(predictions, truths, K: int, T: int, pin_identity: int = 0):
    """Majority-vote ACC; returns (acc, Assignment).

    Each cluster is mapped to the most common true class among its members
    (ties to the lower class id). This attains the maximum over all T x K
    many-to-one assignment matrices. ``pin_identity=n`` forces clusters
    0..n-1 onto classes 0..n-1, for diagnostics.
    """
    predictions, truths = _validate(predictions, truths, K, T)
    counts = confusion_matrix(predictions, truths, K, T)
    mapping = counts.argmax(axis=0)
    if pin_identity:
        mapping[:pin_identity] = np.arange(pin_identity)
    empty = tuple(int(k) for k in np.flatnonzero(counts.sum(axis=0) == 0))
    if empty:
        log.warning("clusters %s are empty on this test set; mapped to class 0", list(empty))
        mapping[list(empty)] = 0
    acc = float((mapping[predictions] == truths).mean())
    return acc, Assignment(mapping, empty)


def classification_accuracy(predictions, truths) -> float:
    return float((np.asarray(predictions) == np.asarray(truths)).mean())


def predict_clusters(params: ParamStore, features, spec: ModelSpec | None = None, batch_size=4096):
    """argmax q(y|x) per row (lowest index wins ties) and the probability rows."""
    spec = spec or params.spec
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.x_dim:
        raise dc.ShapeError(
            f"test features have shape {features.shape} but the model expects {spec.x_dim} dims; "
            "apply the preprocess manifest fitted on the training split")
    probs = np.concatenate([classify(params, features[i:i + batch_size], spec).probs.values
                            for i in range(0, len(features), batch_size)]) if len(features) else \
        np.zeros((0, spec.y_dim))
    return probs.argmax(axis=1), probs


def entropy_report(probabilities, subset_labels, subsets: dict | None = None) -> dict:
    """Entropies split by subset plus summary statistics.

    ``subsets`` maps a subset name to the set of labels it contains; by
    default every distinct label is its own subset.
    """
    H = categorical_entropy(np.asarray(probabilities, dtype=np.float64))
    subset_labels = np.asarray(subset_labels)
    if subsets is None:
        subsets = {str(v): {v} for v in np.unique(subset_labels).tolist()}
    out = {}
    for name, members in subsets.items():
        h = H[np.isin(subset_labels, list(members))]
        stats = {"n": int(h.size)}
        if h.size:
            q1, med, q3 = np.percentile(h, [25, 50, 75])
            stats.update(mean=float(h.mean()), median=float(med), q1=float(q1), q3=float(q3))
        out[name] = {"entropies": h.tolist(), "summary": stats}
    return out


def generation_grid(params: ParamStore, n_z_samples: int, rng: np.random.Generator,
                    spec: ModelSpec | None = None) -> np.ndarray:
    """Decoder means on a [n_z_samples, K, x_dim] grid.

    Rows share one standard-normal draw. For ssvae the draw is z itself and
    columns vary y; for gm-dgm the draw is pushed through each column's
    p(z|y) table entry.
    """
    spec = spec or params.spec
    K = spec.y_dim
    eps = rng.standard_normal((n_z_samples, spec.z_dim))
    eye = np.eye(K)
    out = np.empty((n_z_samples, K, spec.x_dim))
    for k in range(K):
        y = np.repeat(eye[k:k + 1], n_z_samples, axis=0)
        if spec.family == "ssvae":
            z = eps
        else:
            mu = params["theta/prior/mean"][k]
            sd = np.exp(0.5 * params["theta/prior/logvar"][k])
            z = mu + sd * eps
        out[:, k, :] = decode(params, spec, z, y).values
    return out


def most_confident(params: ParamStore, features, n: int, spec: ModelSpec | None = None) -> dict:
    """For each cluster k, the ``n`` example indices with the highest q(y=k|x), best first."""
    if n < 1:
        raise ContractError("n must be at least 1")
    _, probs = predict_clusters(params, features, spec)
    return {k: np.argsort(-probs[:, k], kind="stable")[:n].tolist() for k in range(probs.shape[1])}


def export_latents(params: ParamStore, features, y_policy="argmax", labels=None,
                   spec: ModelSpec | None = None) -> np.ndarray:
    """Posterior means mu(x, y) with y from argmax q(y|x) or from given labels."""
    spec = spec or params.spec
    features = np.asarray(features, dtype=np.float64)
    if y_policy in ("argmax", "use-argmax-q(y|x)"):
        y, _ = predict_clusters(params, features, spec)
    elif y_policy in ("labels", "use-given-labels"):
        if labels is None:
            raise ContractError("the given-labels policy needs labels")
        y = np.asarray(labels, dtype=np.int64)
    else:
        raise ContractError(f"unknown y policy {y_policy!r}")
    onehot = np.eye(spec.y_dim)[y]
    return encode(params, spec, features, onehot).mean.values


# --- reports -------------------------------------------------------------------


@dataclass
class EvalReport:
    acc: float
    accuracy: float | None
    acc_labelled_classes: float | None
    acc_unlabelled_classes: float | None
    confusion: np.ndarray
    assignment: Assignment
    entropies: dict
    n_test: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "accuracy": self.accuracy,
            "acc_labelled_classes": self.acc_labelled_classes,
            "acc_unlabelled_classes": self.acc_unlabelled_classes,
            "confusion": self.confusion.tolist(),
            "assignment": self.assignment.mapping.tolist(),
            "empty_clusters": list(self.assignment.empty_clusters),
            "entropy_summary": {k: v["summary"] for k, v in self.entropies.items()},
            "n_test": self.n_test,
            "meta": self.meta,
        }

    def write(self, directory, stem="eval") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        np.savetxt(d / f"{stem}_confusion.tsv", self.confusion, fmt="%d", delimiter="\t")
        folded = assigned_confusion(self.confusion, self.assignment)
        np.savetxt(d / f"{stem}_assigned_confusion.tsv", folded, fmt="%d", delimiter="\t")
        with open(d / f"{stem}_entropies.tsv", "w") as fh:
            fh.write("subset\tentropy\n")
            for name, v in self.entropies.items():
                for h in v["entropies"]:
                    fh.write(f"{name}\t{h!r}\n")


def evaluate(params: ParamStore, features, truths, n_gt: int, labelled_classes=(), meta=None) -> EvalReport:
    """Full report on a (never masked) test set."""
    spec = params.spec
    truths = np.asarray(truths, dtype=np.int64)
    pred, probs = predict_clusters(params, features, spec)
    acc, assignment = cluster_accuracy(pred, truths, spec.y_dim, n_gt)
    correct = assignment.mapping[pred] == truths
    labelled = np.isin(truths, list(labelled_classes))
    acc_l = float(correct[labelled].mean()) if labelled.any() else None
    acc_u = float(correct[~labelled].mean()) if (~labelled).any() else None
    plain = classification_accuracy(pred, truths) if spec.y_dim >= n_gt else None
    groups = {"labelled_classes": set(labelled_classes),
              "unlabelled_classes": set(range(n_gt)) - set(labelled_classes)}
    groups = {k: v for k, v in groups.items() if v}
    ent = entropy_report(probs, truths, groups)
    return EvalReport(acc, plain, acc_l, acc_u, confusion_matrix(pred, truths, spec.y_dim, n_gt),
                      assignment, ent, len(truths), dict(meta or {}))


# --- PGM output ------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) greymap; values are clipped to [0, 1] and scaled to 0..255."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def tile(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """[rows, cols, H, W] -> one mosaic image with ``pad`` pixel gutters."""
    rows, cols, H, W = images.shape
    out = np.zeros((rows * (H + pad) - pad, cols * (W + pad) - pad))
    for r in range(rows):
        for c in range(cols):
            out[r * (H + pad):r * (H + pad) + H, c * (W + pad):c * (W + pad) + W] = images[r, c]
    return out


def grid_to_image(grid: np.ndarray, restore, image_shape) -> np.ndarray:
    """Map a [rows, cols, x_dim] grid back to pixel layout and tile it."""
    rows, cols, _ = grid.shape
    full = restore(grid.reshape(rows * cols, -1)).reshape(rows, cols, *image_shape)
    return tile(full)
