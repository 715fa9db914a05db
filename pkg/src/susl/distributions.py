"""Densities, KL divergences and reparameterised samplers.

All functions accept :class:`~susl.diffcore.Tensor` or plain arrays and
operate row-wise: the last axis is the event dimension, leading axes are
batch. Reductions over the event axis give one value per row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class ContractError(ValueError):
    pass


@dataclass
class DiagGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mean = dc.as_tensor(self.mean)
        self.logvar = dc.as_tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise dc.ShapeError(f"mean {self.mean.shape} vs log-variance {self.logvar.shape}")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.values)


@dataclass
class CategoricalParams:
    """Probabilities over K outcomes (rows of a batch).

    ``log_probs`` is kept alongside so that log q(y|x) never goes through a
    floored log when the logits are available.
    """

    probs: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits) -> "CategoricalParams":
        logits = dc.as_tensor(logits)
        return cls(dc.softmax(logits), dc.log_softmax(logits))

    @classmethod
    def from_probs(cls, probs) -> "CategoricalParams":
        probs = dc.as_tensor(probs)
        return cls(probs, dc.log(probs))

    @property
    def K(self) -> int:
        return self.probs.shape[-1]


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str = "bernoulli"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gaussian"):
            raise ContractError(f"unknown likelihood {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ContractError("gaussian likelihood needs sigma > 0")


def gaussian_logpdf(x, dist: DiagGaussian) -> Tensor:
    x = dc.as_tensor(x)
    if x.shape[-1] != dist.mean.shape[-1]:
        raise dc.ShapeError(f"x {x.shape} vs mean {dist.mean.shape}")
    diff = dc.sub(x, dist.mean)
    quad = dc.mul(dc.square(diff), dc.exp(dc.neg(dist.logvar)))
    per_dim = dc.add(dc.add(dist.logvar, quad), LOG_2PI)
    return dc.mul(dc.sum_(per_dim, axis=-1), -0.5)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p), summed over the event axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise dc.ShapeError(f"dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    # 0.5 * sum[ lv_p - lv_q + (var_q + (mu_q - mu_p)^2) / var_p - 1 ]
    ratio = dc.exp(dc.sub(q.logvar, p.logvar))
    quad = dc.mul(dc.square(dc.sub(q.mean, p.mean)), dc.exp(dc.neg(p.logvar)))
    inner = dc.sub(dc.add(ratio, quad), dc.add(dc.sub(q.logvar, p.logvar), 1.0))
    return dc.mul(dc.sum_(inner, axis=-1), 0.5)


def kl_diag_gaussian_std_normal(q: DiagGaussian) -> Tensor:
    inner = dc.sub(dc.add(dc.exp(q.logvar), dc.square(q.mean)), dc.add(q.logvar, 1.0))
    return dc.mul(dc.sum_(inner, axis=-1), 0.5)


def reparam_sample(dist: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise.values if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != dist.mean.shape:
        raise dc.ShapeError(f"noise {noise.shape} vs mean {dist.mean.shape}")
    return dc.add(dist.mean, dc.mul(dc.exp(dc.mul(dist.logvar, 0.5)), noise))


def gumbel_noise(uniforms) -> np.ndarray:
    u = np.asarray(uniforms, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ContractError("uniforms must lie strictly inside (0, 1)")
    return -np.log(-np.log(u))


def gumbel_softmax_sample(params: CategoricalParams, temperature: float, uniforms) -> Tensor:
    """Relaxed one-hot sample softmax((log pi + g) / tau)."""
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    g = gumbel_noise(uniforms)
    if g.shape != params.log_probs.shape:
        raise dc.ShapeError(f"uniforms {g.shape} vs probabilities {params.log_probs.shape}")
    return dc.softmax(dc.mul(dc.add(params.log_probs, g), 1.0 / temperature))


def bernoulli_loglik(x, probs, floor=dc.LOG_FLOOR) -> Tensor:
    x = dc.as_tensor(x)
    probs = dc.as_tensor(probs)
    xv = x.values
    if np.any((xv != 0) & (xv != 1)):
        raise ContractError("bernoulli_loglik expects binary x")
    ll = dc.add(dc.mul(x, dc.log(probs, floor)),
                dc.mul(dc.sub(1.0, x), dc.log(dc.sub(1.0, probs), floor)))
    return dc.sum_(ll, axis=-1)


def bernoulli_loglik_soft(x, probs, floor=dc.LOG_FLOOR) -> Tensor:
    """Same formula without the binary check, for grey-scale targets."""
    x = dc.as_tensor(x)
    ll = dc.add(dc.mul(x, dc.log(probs, floor)),
                dc.mul(dc.sub(1.0, x), dc.log(dc.sub(1.0, probs), floor)))
    return dc.sum_(ll, axis=-1)


def fixed_gaussian_loglik(x, mean, sigma: float) -> Tensor:
    x = dc.as_tensor(x)
    d = x.shape[-1]
    sq = dc.sum_(dc.square(dc.sub(x, mean)), axis=-1)
    const = -0.5 * d * (LOG_2PI + 2.0 * math.log(sigma))
    return dc.add(dc.mul(sq, -0.5 / sigma**2), const)


def likelihood_loglik(spec: LikelihoodSpec, x, decoded) -> Tensor:
    """Log p(x | decoder output); ``decoded`` is probabilities or means."""
    if spec.kind == "bernoulli":
        return bernoulli_loglik_soft(x, decoded)
    return fixed_gaussian_loglik(x, decoded, spec.sigma)


def categorical_entropy(params) -> np.ndarray:
    """Entropy in nats of each probability row. Plain numpy; used for diagnostics."""
    p = params.probs.values if isinstance(params, CategoricalParams) else np.asarray(params, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)
