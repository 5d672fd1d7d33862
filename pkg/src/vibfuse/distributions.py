"""Diagonal Gaussians, Gaussian-mixture priors, and KL / rate estimators.

All divergences are in nats. Functions accept either plain arrays or
autodiff Tensors; passing Tensors keeps the result differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ShapeError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

_LOG_2PI = np.log(2.0 * np.pi)


def _clamp_lv(lv):
    return ad.clamp(as_tensor(lv), LOG_VAR_MIN, LOG_VAR_MAX)


@dataclass
class DiagGaussian:
    """Posterior over the latent space: mean and per-dim log-variance."""

    mean: object  # Tensor or ndarray, shape [d]
    log_var: object  # Tensor or ndarray, shape [d]

    @property
    def dim(self) -> int:
        return as_tensor(self.mean).data.shape[-1]

    def numpy(self) -> "DiagGaussian":
        return DiagGaussian(as_tensor(self.mean).data.copy(), as_tensor(self.log_var).data.copy())


@dataclass
class GmmPrior:
    """Learned marginal over latents: mixture of diagonal Gaussians."""

    component_logits: object  # [K]
    means: object  # [K, d]
    log_vars: object  # [K, d]

    @property
    def n_components(self) -> int:
        return as_tensor(self.component_logits).data.shape[0]

    @property
    def dim(self) -> int:
        return as_tensor(self.means).data.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, n_components: int = 512, dim: int = 64) -> "GmmPrior":
        """Means from N(0, 0.1^2), unit variances, uniform logits."""
        return cls(
            component_logits=np.zeros(n_components),
            means=0.1 * rng.standard_normal((n_components, dim)),
            log_vars=np.zeros((n_components, dim)),
        )

    def params(self, prefix: str = "prior") -> ad.ParameterSet:
        ps = ad.ParameterSet()
        ps.add(f"{prefix}.logits", as_tensor(self.component_logits).data)
        ps.add(f"{prefix}.means", as_tensor(self.means).data)
        ps.add(f"{prefix}.log_vars", as_tensor(self.log_vars).data)
        return ps

    @classmethod
    def from_params(cls, get, prefix: str = "prior") -> "GmmPrior":
        return cls(get(f"{prefix}.logits"), get(f"{prefix}.means"), get(f"{prefix}.log_vars"))


def reparam_sample(g: DiagGaussian, noise) -> Tensor:
    """mean + exp(log_var / 2) * noise, differentiable in both parameters."""
    mean, noise = as_tensor(g.mean), as_tensor(noise)
    if noise.data.shape[-1] != mean.data.shape[-1]:
        raise ShapeError(f"noise dim {noise.data.shape} != mean dim {mean.data.shape}")
    std = ad.exp(0.5 * _clamp_lv(g.log_var))
    return mean + std * noise


def log_prob_diag(g: DiagGaussian, z) -> Tensor:
    """Diagonal-Gaussian log density at z; scalar for a single [d] input."""
    mean, z = as_tensor(g.mean), as_tensor(z)
    if z.data.shape[-1] != mean.data.shape[-1]:
        raise ShapeError(f"z dim {z.data.shape} != mean dim {mean.data.shape}")
    lv = _clamp_lv(g.log_var)
    diff = z - mean
    quad = ad.square(diff) * ad.exp(-lv)
    return -0.5 * ad.reduce_sum(quad + lv + _LOG_2PI, axis=-1)


def log_prob_gmm(prior: GmmPrior, z) -> Tensor:
    """Mixture log density at z; supports a trailing latent axis of size d.

    z of shape [d] gives a scalar; [S, d] gives one log density per row.
    """
    if prior.n_components == 0:
        raise ShapeError("GMM prior has zero components")
    logits = as_tensor(prior.component_logits)
    means = as_tensor(prior.means)
    lvs = _clamp_lv(prior.log_vars)
    z = as_tensor(z)
    if z.data.shape[-1] != prior.dim:
        raise ShapeError(f"z dim {z.data.shape[-1]} != prior dim {prior.dim}")
    single = z.data.ndim == 1
    zb = ad.reshape(z, (-1, 1, prior.dim))  # [S, 1, d]
    mb = ad.reshape(means, (1, prior.n_components, prior.dim))
    vb = ad.reshape(lvs, (1, prior.n_components, prior.dim))
    diff = zb - mb
    comp_lp = -0.5 * ad.reduce_sum(ad.square(diff) * ad.exp(-vb) + vb + _LOG_2PI, axis=-1)  # [S, K]
    log_weights = logits - ad.logsumexp(logits, axis=-1)
    out = ad.logsumexp(comp_lp + ad.reshape(log_weights, (1, -1)), axis=-1)  # [S]
    return out[0] if single else out


def kl_diag_diag(a: DiagGaussian, b: DiagGaussian) -> float:
    """Closed-form KL(a || b) for diagonal Gaussians, in nats."""
    ma, la = as_tensor(a.mean).data, np.clip(as_tensor(a.log_var).data, LOG_VAR_MIN, LOG_VAR_MAX)
    mb, lb = as_tensor(b.mean).data, np.clip(as_tensor(b.log_var).data, LOG_VAR_MIN, LOG_VAR_MAX)
    if ma.shape != mb.shape:
        raise ShapeError(f"KL: dimension mismatch {ma.shape} vs {mb.shape}")
    terms = np.exp(la - lb) + (mb - ma) ** 2 * np.exp(-lb) - 1.0 + lb - la
    return float(0.5 * terms.sum())


def mc_rate(posterior: DiagGaussian, prior: GmmPrior, samples) -> Tensor:
    """Monte-Carlo rate: mean over samples of log p(z|x) - log r(z), nats.

    samples is a list of [d] tensors (or a stacked [S, d] array) drawn via
    reparam_sample; gradients flow into posterior and prior parameters.
    """
    if isinstance(samples, (list, tuple)):
        if len(samples) == 0:
            raise ShapeError("mc_rate: empty sample list")
        zs = ad.concat([ad.reshape(as_tensor(s), (1, -1)) for s in samples], axis=0)
    else:
        zs = as_tensor(samples)
        if zs.data.ndim != 2 or zs.data.shape[0] == 0:
            raise ShapeError(f"mc_rate: expected [S, d] samples, got {zs.data.shape}")
    lp_post = log_prob_diag(posterior, zs)  # [S]
    lp_prior = log_prob_gmm(prior, zs)  # [S]
    return ad.reduce_mean(lp_post - lp_prior)
