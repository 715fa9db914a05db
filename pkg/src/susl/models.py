"""SSVAE (M2) and GM-DGM networks and their variational objectives.

Both families share the recognition side: a classifier ``q(y|x)`` and an
encoder ``q(z|x,y)`` taking ``[x; y]``. They differ in the generative side:

* ``ssvae``:  p(x|y,z) p(y) p(z), decoder input ``[z; y]``, p(z) = N(0, I)
* ``gm-dgm``: p(x|z) p(z|y) p(y), decoder input ``z``, p(z|y) a learned
  per-class table of means and log-variances.

All objectives are returned as quantities to *maximise*.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import diffcore as dc
from . import distributions as dist
from .diffcore import Tensor
from .distributions import CategoricalParams, ContractError, DiagGaussian, LikelihoodSpec

FAMILIES = ("ssvae", "gm-dgm")


@dataclass(frozen=True)
class ClassPrior:
    probabilities: tuple
    n_labelled: int
    n_augmented: int = 0

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError("class prior must be a probability vector")

    @property
    def K(self) -> int:
        return len(self.probabilities)

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(np.asarray(self.probabilities, dtype=np.float64))

    @classmethod
    def uniform(cls, K: int) -> "ClassPrior":
        return cls(tuple([float(Fraction(1, K))] * K), K, 0)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    x_dim: int
    z_dim: int
    y_dim: int
    hidden_units: int = 200
    hidden_layers: int = 2
    likelihood: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    alpha: float = 0.1
    prior: ClassPrior | None = None
    activation: str = "relu"
    temperature: float = 0.5
    kl_mode: str = "analytic"
    init_std: float = 0.001
    prior_init_std: float | None = None  # GM-DGM table means; None follows init_std

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown model family {self.family!r}")
        if min(self.x_dim, self.z_dim, self.y_dim, self.hidden_units, self.hidden_layers) < 1:
            raise ContractError("all dimensions must be positive")
        if self.alpha < 0:
            raise ContractError("alpha must be nonnegative")
        if self.activation not in dc.ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.kl_mode not in ("analytic", "sample"):
            raise ContractError(f"unknown kl_mode {self.kl_mode!r}")
        if self.prior is None:
            object.__setattr__(self, "prior", ClassPrior.uniform(self.y_dim))
        if self.prior.K != self.y_dim:
            raise ContractError(f"prior has {self.prior.K} entries, label space has {self.y_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"]["probabilities"] = list(self.prior.probabilities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        d["likelihood"] = LikelihoodSpec(**d["likelihood"])
        pr = dict(d["prior"])
        pr["probabilities"] = tuple(pr["probabilities"])
        d["prior"] = ClassPrior(**pr)
        return cls(**d)


# --- parameters --------------------------------------------------------------


def _layer_shapes(spec: ModelSpec) -> dict[str, tuple]:
    K, h, L = spec.y_dim, spec.hidden_units, spec.hidden_layers
    dec_in = spec.z_dim + K if spec.family == "ssvae" else spec.z_dim
    shapes: dict[str, tuple] = {}

    def mlp(prefix, n_in):
        for i in range(L):
            shapes[f"{prefix}/W{i}"] = (n_in if i == 0 else h, h)
            shapes[f"{prefix}/b{i}"] = (h,)

    mlp("phi/cls", spec.x_dim)
    shapes["phi/cls/Wout"] = (h, K)
    shapes["phi/cls/bout"] = (K,)
    mlp("phi/enc", spec.x_dim + K)
    shapes["phi/enc/Wmean"] = (h, spec.z_dim)
    shapes["phi/enc/bmean"] = (spec.z_dim,)
    shapes["phi/enc/Wlogvar"] = (h, spec.z_dim)
    shapes["phi/enc/blogvar"] = (spec.z_dim,)
    mlp("theta/dec", dec_in)
    shapes["theta/dec/Wout"] = (h, spec.x_dim)
    shapes["theta/dec/bout"] = (spec.x_dim,)
    if spec.family == "gm-dgm":
        shapes["theta/prior/mean"] = (K, spec.z_dim)
        shapes["theta/prior/logvar"] = (K, spec.z_dim)
    return shapes


class ParamStore:
    """Named float64 arrays for generative (``theta/``) and recognition (``phi/``) parameters."""

    def __init__(self, spec: ModelSpec, values: dict[str, np.ndarray]):
        self.spec = spec
        self.values = values
        expected = _layer_shapes(spec)
        if set(expected) != set(values):
            raise ContractError(f"parameter names do not match spec: {sorted(set(expected) ^ set(values))}")
        for name, shape in expected.items():
            if values[name].shape != shape:
                raise dc.ShapeError(f"{name}: expected {shape}, got {values[name].shape}")

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    @property
    def theta(self):
        return {k: v for k, v in self.values.items() if k.startswith("theta/")}

    @property
    def phi(self):
        return {k: v for k, v in self.values.items() if k.startswith("phi/")}

    def leaves(self) -> dict[str, Tensor]:
        return {k: dc.leaf(v) for k, v in self.values.items()}

    def consts(self) -> dict[str, Tensor]:
        return {k: dc.const(v) for k, v in self.values.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, {k: v.copy() for k, v in self.values.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())


def build_model(spec: ModelSpec, seed: int) -> ParamStore:
    """Kernels ~ N(0, init_std^2), biases zero; GM-DGM table means ~ N(0, prior_init_std^2), log-variances zero."""
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in _layer_shapes(spec).items():
        leafname = name.rsplit("/", 1)[1]
        if name == "theta/prior/mean":
            sd = spec.init_std if spec.prior_init_std is None else spec.prior_init_std
            values[name] = rng.normal(0.0, sd, size=shape)
        elif leafname.startswith("W"):
            values[name] = rng.normal(0.0, spec.init_std, size=shape)
        else:
            values[name] = np.zeros(shape)
    return ParamStore(spec, values)


def _bind(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamStore):
        return params.consts()
    return params


# --- networks ----------------------------------------------------------------


def _trunk(p, prefix, h, spec, rowwise=False):
    act = dc.ACTIVATIONS[spec.activation]
    for i in range(spec.hidden_layers):
        h = act(dc.bias_add(dc.matmul(h, p[f"{prefix}/W{i}"], rowwise), p[f"{prefix}/b{i}"]))
    return h


def _check_x(x, spec):
    x = dc.as_tensor(x)
    if x.values.ndim != 2 or x.shape[1] != spec.x_dim:
        raise dc.ShapeError(f"expected inputs of shape [batch, {spec.x_dim}], got {x.shape}")
    return x


def classifier_logits(params, spec: ModelSpec, x, rowwise=False) -> Tensor:
    p = _bind(params)
    x = _check_x(x, spec)
    h = _trunk(p, "phi/cls", x, spec, rowwise)
    return dc.bias_add(dc.matmul(h, p["phi/cls/Wout"], rowwise), p["phi/cls/bout"])


def classify(params, x, spec: ModelSpec | None = None, rowwise=True) -> CategoricalParams:
    """q(y|x) for every row of ``x``.

    The default row-by-row evaluation makes each row's output independent
    of batch composition; objectives pass ``rowwise=False`` for speed.
    """
    if spec is None:
        spec = params.spec
    return CategoricalParams.from_logits(classifier_logits(params, spec, x, rowwise))


def encode(params, spec: ModelSpec, x, y) -> DiagGaussian:
    """q(z|x,y); ``y`` may be one-hot or a relaxed simplex sample."""
    p = _bind(params)
    h = _trunk(p, "phi/enc", dc.concat([_check_x(x, spec), dc.as_tensor(y)], axis=-1), spec)
    mean = dc.bias_add(dc.matmul(h, p["phi/enc/Wmean"]), p["phi/enc/bmean"])
    logvar = dc.bias_add(dc.matmul(h, p["phi/enc/Wlogvar"]), p["phi/enc/blogvar"])
    return DiagGaussian(mean, logvar)


def decode(params, spec: ModelSpec, z, y=None) -> Tensor:
    """Mean of p(x|.): Bernoulli probabilities or Gaussian means."""
    p = _bind(params)
    inp = dc.as_tensor(z)
    if spec.family == "ssvae":
        inp = dc.concat([inp, dc.as_tensor(y)], axis=-1)
    h = _trunk(p, "theta/dec", inp, spec)
    out = dc.bias_add(dc.matmul(h, p["theta/dec/Wout"]), p["theta/dec/bout"])
    return dc.sigmoid(out) if spec.likelihood.kind == "bernoulli" else out


def z_prior(params, spec: ModelSpec, y) -> DiagGaussian | None:
    """p(z|y) for GM-DGM as a convex combination of table entries; None means N(0, I)."""
    if spec.family == "ssvae":
        return None
    p = _bind(params)
    y = dc.as_tensor(y)
    mean = dc.matmul(y, p["theta/prior/mean"])
    var = dc.matmul(y, dc.exp(p["theta/prior/logvar"]))
    return DiagGaussian(mean, dc.log(var))


def _gauss_kl(spec, q: DiagGaussian, prior: DiagGaussian | None, z) -> Tensor:
    if spec.kl_mode == "analytic":
        if prior is None:
            return dist.kl_diag_gaussian_std_normal(q)
        return dist.kl_diag_gaussians(q, prior)
    # single-sample log-ratio log q(z) - log p(z)
    if prior is None:
        zeros = np.zeros(q.mean.shape)
        prior = DiagGaussian(dc.const(zeros), dc.const(zeros))
    return dc.sub(dist.gaussian_logpdf(z, q), dist.gaussian_logpdf(z, prior))


def _check_onehot(y):
    v = y.values if isinstance(y, Tensor) else np.asarray(y)
    if v.ndim != 2 or not (np.all((v == 0) | (v == 1)) and np.all(v.sum(axis=1) == 1)):
        raise ContractError("labels must be exact one-hot rows")


def elbo_labelled(params, spec: ModelSpec, x, y_onehot, z_noise) -> Tensor:
    """Per-row E_q(z|x,y)[log p(x|.)] + log p(y) - KL(q(z|x,y) || p(z|y))."""
    _check_onehot(y_onehot)
    y = dc.as_tensor(y_onehot)
    q = encode(params, spec, x, y)
    z = dist.reparam_sample(q, z_noise)
    recon = dist.likelihood_loglik(spec.likelihood, _check_x(x, spec), decode(params, spec, z, y))
    log_py = y.values @ spec.prior.log_probs
    kl = _gauss_kl(spec, q, z_prior(params, spec, y), z)
    return dc.add(dc.sub(recon, kl), log_py)


def categorical_kl_term(qy: CategoricalParams, prior: ClassPrior) -> Tensor:
    """E_q(y|x)[log p(y) - log q(y|x)] per row, computed exactly."""
    return dc.sum_(dc.mul(qy.probs, dc.sub(prior.log_probs, qy.log_probs)), axis=-1)


def elbo_unlabelled(params, spec: ModelSpec, x, z_noise, uniforms, qy: CategoricalParams | None = None) -> Tensor:
    """Per-row unlabelled bound with one relaxed y sample and one z sample."""
    if qy is None:
        qy = classify(params, x, spec, rowwise=False)
    y_hat = dist.gumbel_softmax_sample(qy, spec.temperature, uniforms)
    q = encode(params, spec, x, y_hat)
    z = dist.reparam_sample(q, z_noise)
    recon = dist.likelihood_loglik(spec.likelihood, _check_x(x, spec), decode(params, spec, z, y_hat))
    kl = _gauss_kl(spec, q, z_prior(params, spec, y_hat), z)
    return dc.add(dc.sub(recon, kl), categorical_kl_term(qy, spec.prior))


@dataclass
class StepNoise:
    z_labelled: np.ndarray
    z_unlabelled: np.ndarray
    uniforms: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, spec: ModelSpec, n_labelled: int, n_unlabelled: int) -> "StepNoise":
        zl = rng.standard_normal((n_labelled, spec.z_dim))
        zu = rng.standard_normal((n_unlabelled, spec.z_dim))
        # open interval (0, 1): random() is [0, 1)
        u = 1.0 - rng.random((n_unlabelled, spec.y_dim))
        np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg, out=u)
        return cls(zl, zu, u)


def total_objective(params, spec: ModelSpec, x_labelled, y_labelled, x_unlabelled,
                    noise: StepNoise, stats: dict | None = None) -> Tensor:
    """mean_l[ELBO_l + alpha log q(y_l|x_l)] + mean_u[ELBO_u]; to be maximised."""
    has_l = x_labelled is not None and len(x_labelled) > 0
    has_u = x_unlabelled is not None and len(x_unlabelled) > 0
    if not (has_l or has_u):
        raise ContractError("total_objective needs at least one nonempty batch")
    terms = []
    if has_l:
        elbo_l = elbo_labelled(params, spec, x_labelled, y_labelled, noise.z_labelled)
        qy = classify(params, x_labelled, spec, rowwise=False)
        log_q = dc.sum_(dc.mul(qy.log_probs, np.asarray(y_labelled, dtype=np.float64)), axis=-1)
        terms.append(dc.mean(dc.add(elbo_l, dc.mul(log_q, spec.alpha))))
        if stats is not None:
            stats["elbo_labelled"] = float(elbo_l.values.mean())
            stats["cross_entropy"] = float(-log_q.values.mean())
    if has_u:
        elbo_u = elbo_unlabelled(params, spec, x_unlabelled, noise.z_unlabelled, noise.uniforms)
        terms.append(dc.mean(elbo_u))
        if stats is not None:
            stats["elbo_unlabelled"] = float(elbo_u.values.mean())
    out = terms[0] if len(terms) == 1 else dc.add(terms[0], terms[1])
    if stats is not None:
        stats["objective"] = float(out.values)
    return out


def objective_and_grads(store: ParamStore, x_labelled, y_labelled, x_unlabelled, noise: StepNoise):
    """Evaluate the objective on a fresh tape; returns (value, {name: d objective / d param}, stats)."""
    stats: dict = {}
    with dc.Tape() as tape:
        leaves = store.leaves()
        obj = total_objective(leaves, store.spec, x_labelled, y_labelled, x_unlabelled, noise, stats)
        tape.backward(obj)
    return float(obj.values), {k: t.grad for k, t in leaves.items()}, stats


# --- checkpoint container ----------------------------------------------------

_META_KEY = "__meta__"


def save_params(path, store: ParamStore, seed: int, extra_arrays: Mapping[str, np.ndarray] | None = None,
                extra_meta: Mapping | None = None) -> None:
    """Write an ``.npz`` container: named float64 tensors plus JSON metadata."""
    meta = {"spec": store.spec.to_dict(), "seed": int(seed), "params": sorted(store.values)}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param:{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in store.values.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra:{k}"] = np.ascontiguousarray(v)
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    """Inverse of :func:`save_params`; returns (store, seed, extra_arrays, meta)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[_META_KEY]))
        spec = ModelSpec.from_dict(meta["spec"])
        values = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
        extra = {k[len("extra:"):]: z[k].copy() for k in z.files if k.startswith("extra:")}
    return ParamStore(spec, values), meta["seed"], extra, meta
