"""Rate-based multi-sensor action fusion.

Per-modality uncertainty scores (rates, in nats) are converted to action
weights: the complement rule w_j = (sum_i r_i) - r_j gives low-rate
modalities high unnormalized weight, then either linear or softmax
normalization produces a convex combination of the per-modality actions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import policy as policy_mod
from .errors import NumericError, ShapeError, VibfuseError
from .policy import FusionMode, MultiModalPolicy


class WeightScheme(Enum):
    LINEAR = "linear"
    SOFTMAX = "softmax"


@dataclass
class FusionWeights:
    weights: np.ndarray  # one per modality, in [0, 1], summing to 1
    scheme: WeightScheme
    temperature: float = 1.0
    degenerate: bool = False  # all-zero rates fell back to uniform


def unnormalized_weights(rates) -> np.ndarray:
    """w_j = (sum of all rates) - rate_j."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.ndim != 1 or rates.size < 1:
        raise ShapeError(f"rates must be a nonempty vector, got shape {rates.shape}")
    if not np.all(np.isfinite(rates)):
        raise NumericError("non-finite rate")
    return rates.sum() - rates


def linear_weights(rates) -> FusionWeights:
    """Complement weights divided by (N-1) * sum(rates); uniform fallback.

    For two modalities this is exactly w_j = (r_total - r_j) / r_total.
    """
    rates = np.clip(np.asarray(rates, dtype=np.float64), 0.0, None)
    wbar = unnormalized_weights(rates)
    n = rates.size
    total = rates.sum()
    if n == 1:
        return FusionWeights(np.ones(1), WeightScheme.LINEAR)
    if total <= 0.0:
        warnings.warn("all rates zero; falling back to uniform fusion weights")
        return FusionWeights(np.full(n, 1.0 / n), WeightScheme.LINEAR, degenerate=True)
    return FusionWeights(wbar / ((n - 1) * total), WeightScheme.LINEAR)


def softmax_weights(rates, temperature: float = 1.0) -> FusionWeights:
    """softmax(w_bar / temperature); low temperature approaches argmin rate."""
    if temperature <= 0:
        raise VibfuseError(f"temperature must be positive, got {temperature}")
    rates = np.clip(np.asarray(rates, dtype=np.float64), 0.0, None)
    wbar = unnormalized_weights(rates) / temperature
    wbar = wbar - wbar.max()
    e = np.exp(wbar)
    return FusionWeights(e / e.sum(), WeightScheme.SOFTMAX, temperature=temperature)


def fuse_actions(actions, weights: FusionWeights) -> np.ndarray:
    """Convex combination sum_i w_i a_i of per-modality actions."""
    acts = [np.asarray(a, dtype=np.float64) for a in actions]
    if len(acts) != weights.weights.size:
        raise ShapeError(f"{len(acts)} actions but {weights.weights.size} weights")
    dims = {a.shape for a in acts}
    if len(dims) != 1:
        raise ShapeError(f"action dimension mismatch: {sorted(dims)}")
    return sum(w * a for w, a in zip(weights.weights, acts))


def fused_step(multi: MultiModalPolicy, obs_per_modality: dict,
               rng: np.random.Generator,
               force_modality=None):
    """One fused control step.

    Returns (action, FusionWeights, rates). Rates and per-modality actions
    share one sampling pass. force_modality pins all weight on one modality
    (ablation hook) while still reporting true rates.
    """
    for p in multi.policies:
        if p.modality not in obs_per_modality:
            raise ShapeError(f"missing observation for modality {p.modality}")

    if multi.fusion_mode == FusionMode.CONCAT_FUSION:
        action, rates = policy_mod.concat_predict(multi, obs_per_modality, rng)
        n = len(multi.policies)
        return action, FusionWeights(np.full(n, 1.0 / n), WeightScheme.LINEAR), rates

    actions, rates = [], []
    for p in multi.policies:
        action, rate, _ = policy_mod.sample_actions_and_rate(
            p, obs_per_modality[p.modality].grid, rng
        )
        actions.append(action)
        rates.append(rate)

    if force_modality is not None:
        idx = next(i for i, p in enumerate(multi.policies) if p.modality == force_modality)
        onehot = np.zeros(len(actions))
        onehot[idx] = 1.0
        return actions[idx], FusionWeights(onehot, WeightScheme.LINEAR), rates

    if multi.fusion_mode == FusionMode.SINGLE:
        if len(multi.policies) != 1:
            raise VibfuseError("SINGLE fusion mode requires exactly one modality")
        return actions[0], FusionWeights(np.ones(1), WeightScheme.LINEAR), rates
    if multi.fusion_mode == FusionMode.RATE_LINEAR:
        weights = linear_weights(rates)
    elif multi.fusion_mode == FusionMode.RATE_SOFTMAX:
        weights = softmax_weights(rates, multi.temperature)
    else:
        raise VibfuseError(f"unsupported fusion mode {multi.fusion_mode}")
    return fuse_actions(actions, weights), weights, rates


def fusion_controller(multi: MultiModalPolicy, force_modality=None, log: list | None = None):
    """envsim-compatible controller; optionally appends per-step diagnostics."""

    def controller(obs, rng):
        action, weights, rates = fused_step(multi, obs, rng, force_modality=force_modality)
        if log is not None:
            log.append({"rates": list(rates), "weights": weights.weights.tolist(),
                        "action": action.tolist()})
        return action

    return controller
