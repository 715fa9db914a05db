"""Adam with cosine decay, paired labelled/unlabelled minibatching, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import RegimeDataset, binarize_batch
from .models import ModelSpec, ParamStore, StepNoise, build_model, load_params, objective_and_grads, save_params

log = logging.getLogger(__name__)

STREAMS = ("init", "binarize", "sampling", "shuffle")


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, base_lr=1e-3) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, base_lr)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None, epoch=None):
    """One Adam descent step on ``grads`` (gradients of the loss), in place.

    Every gradient is checked before any parameter moves, so a bad gradient
    leaves parameters and moments untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name} at epoch {epoch}, step {state.step}")
    lr = state.base_lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(step, total_steps, base_lr) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 64
    base_lr: float = 1e-3
    seed: int = 0
    eval_every: int = 0
    binarize: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 1 <= self.epochs <= 400:
            raise ValueError("epochs must be in 1..400")
        if self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("batch size and learning rate must be positive")


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    checkpoint: str | None = None

    def objective_trace(self) -> list:
        return [r["objective"] for r in self.records]

    def to_tsv(self) -> str:
        lines = ["epoch\tobjective\tce_loss\tlr\telapsed_seconds"]
        for r in self.records:
            ce = "" if r["ce_loss"] is None else repr(r["ce_loss"])
            lines.append(f"{r['epoch']}\t{r['objective']!r}\t{ce}\t{r['lr']!r}\t{r['elapsed']:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv())

    @staticmethod
    def read_trace(path) -> list:
        rows = Path(path).read_text().splitlines()[1:]
        return [float(r.split("\t")[1]) for r in rows]


def make_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def one_hot(labels, K: int) -> np.ndarray:
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n) if n else np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0 and self.n:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            j = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + j])
            self.pos += j
            k -= j
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class Trainer:
    """Holds everything needed to continue a run bit-for-bit after a checkpoint."""

    def __init__(self, spec: ModelSpec, regime: RegimeDataset, config: TrainConfig,
                 store: ParamStore | None = None):
        self.spec = spec
        self.regime = regime
        self.config = config
        if regime.labelled_classes and max(regime.labelled_classes) >= spec.y_dim:
            raise ValueError("labelled classes do not fit in the model's label space")
        self.streams = make_streams(config.seed)
        init_seed = int(self.streams["init"].integers(2**63))
        self.store = store if store is not None else build_model(spec, init_seed)
        self.opt = OptimizerState.zeros_like(self.store.values, config.base_lr)
        self.labelled = _Cycler(len(regime.y_labelled), self.streams["shuffle"])
        self.y_onehot = one_hot(regime.y_labelled, spec.y_dim)
        self.epoch = 0
        self.log = RunLog()
        self.extra_meta: dict = {}
        n_pass = len(regime.x_unlabelled) or len(regime.y_labelled)
        self.steps_per_epoch = math.ceil(n_pass / config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs

    def _batch(self, u_idx):
        cfg, r = self.config, self.regime
        xu = r.x_unlabelled[u_idx]
        n_l = len(u_idx) if len(xu) else cfg.batch_size
        l_idx = self.labelled.take(n_l) if len(r.y_labelled) else np.zeros(0, dtype=np.int64)
        xl, yl = r.x_labelled[l_idx], self.y_onehot[l_idx]
        if cfg.binarize:
            xu = binarize_batch(xu, self.streams["binarize"])
            xl = binarize_batch(xl, self.streams["binarize"])
        noise = StepNoise.draw(self.streams["sampling"], self.spec, len(xl), len(xu))
        return xl, yl, xu, noise

    def _epoch_batches(self):
        r, B = self.regime, self.config.batch_size
        if len(r.x_unlabelled):
            perm = self.streams["shuffle"].permutation(len(r.x_unlabelled))
            return [perm[i:i + B] for i in range(0, len(perm), B)]
        return [np.zeros(0, dtype=np.int64)] * self.steps_per_epoch

    def step(self, u_idx) -> tuple:
        """One optimisation step; returns (objective, stats)."""
        value, grads, stats = objective_and_grads(self.store, *self._batch(u_idx))
        if not math.isfinite(value):
            raise TrainingDivergedError(f"objective {value} at epoch {self.epoch + 1}, step {self.opt.step}")
        lr = cosine_lr(self.opt.step, self.total_steps, self.config.base_lr)
        adam_step(self.store.values, {k: -g for k, g in grads.items()}, self.opt, lr, epoch=self.epoch + 1)
        stats["lr"] = lr
        return value, stats

    def grads_for_next_step(self) -> dict:
        """Gradients the next epoch's first step would use; leaves all state untouched."""
        saved = self.snapshot_state()
        _, grads, _ = objective_and_grads(self.store, *self._batch(self._epoch_batches()[0]))
        self.restore_state(saved)
        return grads

    def run_epoch(self) -> dict:
        t0 = time.perf_counter()
        batches = self._epoch_batches()
        objs, ces = [], []
        lr = self.config.base_lr
        for u_idx in batches:
            value, stats = self.step(u_idx)
            objs.append(value)
            if "cross_entropy" in stats:
                ces.append(stats["cross_entropy"])
            lr = stats["lr"]
        self.epoch += 1
        rec = {"epoch": self.epoch, "objective": float(np.mean(objs)),
               "ce_loss": float(np.mean(ces)) if ces else None, "lr": lr,
               "elapsed": time.perf_counter() - t0}
        self.log.records.append(rec)
        return rec

    # --- state persistence ------------------------------------------------

    def snapshot_state(self) -> dict:
        return {
            "rng": {k: g.bit_generator.state for k, g in self.streams.items()},
            "labelled_perm": self.labelled.perm.copy(),
            "labelled_pos": self.labelled.pos,
        }

    def restore_state(self, s: dict) -> None:
        for k, st in s["rng"].items():
            self.streams[k].bit_generator.state = st
        self.labelled.perm = np.asarray(s["labelled_perm"], dtype=np.int64)
        self.labelled.pos = int(s["labelled_pos"])

    def save(self, path) -> None:
        s = self.snapshot_state()
        extra = {f"adam_m:{k}": v for k, v in self.opt.m.items()}
        extra.update({f"adam_v:{k}": v for k, v in self.opt.v.items()})
        extra["labelled_perm"] = s["labelled_perm"]
        meta = {
            "epoch": self.epoch,
            "adam_step": self.opt.step,
            "rng": s["rng"],
            "labelled_pos": s["labelled_pos"],
            "train_config": asdict(self.config),
            "regime_hash": self.regime.manifest_hash(),
            "records": self.log.records,
            **self.extra_meta,
        }
        save_params(path, self.store, self.config.seed, extra, meta)
        self.log.checkpoint = str(path)

    @classmethod
    def resume(cls, path, regime: RegimeDataset, config: TrainConfig | None = None) -> "Trainer":
        store, seed, extra, meta = load_params(path)
        if meta["regime_hash"] != regime.manifest_hash():
            raise ValueError("checkpoint was written for a different data split")
        config = config or TrainConfig(**meta["train_config"])
        tr = cls(store.spec, regime, config, store=store)
        tr.opt.m = {k: extra[f"adam_m:{k}"] for k in store.values}
        tr.opt.v = {k: extra[f"adam_v:{k}"] for k in store.values}
        tr.opt.step = meta["adam_step"]
        tr.epoch = meta["epoch"]
        tr.log.records = list(meta["records"])
        tr.restore_state({"rng": meta["rng"], "labelled_perm": extra["labelled_perm"],
                          "labelled_pos": meta["labelled_pos"]})
        return tr


def train(spec: ModelSpec, regime: RegimeDataset, config: TrainConfig,
          checkpoint_dir=None, eval_fn: Callable | None = None, progress: bool = False,
          extra_meta: dict | None = None):
    """Maximise the total objective; returns (ParamStore, RunLog)."""
    tr = Trainer(spec, regime, config)
    tr.extra_meta.update(extra_meta or {})
    return continue_training(tr, checkpoint_dir, eval_fn, progress)


def continue_training(tr: Trainer, checkpoint_dir=None, eval_fn: Callable | None = None, progress=False):
    cfg = tr.config
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    while tr.epoch < cfg.epochs:
        try:
            rec = tr.run_epoch()
        except (TrainingDivergedError, NonFiniteGradientError):
            if checkpoint_dir is not None:
                tr.save(Path(checkpoint_dir) / "diverged.npz")
            raise
        if eval_fn is not None and cfg.eval_every and tr.epoch % cfg.eval_every == 0:
            rec["eval"] = eval_fn(tr.store, tr.epoch)
        if checkpoint_dir is not None and cfg.checkpoint_every and tr.epoch % cfg.checkpoint_every == 0:
            tr.save(Path(checkpoint_dir) / f"epoch{tr.epoch:04d}.npz")
        if progress:
            log.info("epoch %d objective %.4f ce %s lr %.2e (%.1fs)", rec["epoch"], rec["objective"],
                     rec["ce_loss"], rec["lr"], rec["elapsed"])
    if checkpoint_dir is not None:
        tr.save(Path(checkpoint_dir) / "final.npz")
    return tr.store, tr.log


def default_alpha(n_total: int, n_labelled: int) -> float:
    return 0.1 * n_total / n_labelled if n_labelled else 0.0


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))
