"""Post-hoc diagnostics for trained policies.

Rate trajectories over episodes, KL nearest-neighbor retrieval in the
posterior space, cross-domain retrieval scoring, rate-based OOD AUROC, and
fusion/modality ablation tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envsim, fusion, policy as policy_mod
from .distributions import kl_diag_diag, log_prob_gmm, reparam_sample
from .envsim import DemoDataset, DomainStyle, Modality, Phase
from .errors import ShapeError, VibfuseError
from .policy import ModalityPolicy, MultiModalPolicy
from .rng import named_stream


@dataclass
class RateTrajectory:
    steps: list  # t per step
    means: dict  # Modality -> list of per-step mean rate
    stds: dict  # Modality -> list of per-step std over mc samples
    phases: list  # Phase per step


@dataclass
class NeighborResult:
    anchor_index: int
    neighbors: list  # (dataset index, kl_nats, domain tag, phase), kl ascending


def _per_sample_rates(policy: ModalityPolicy, obs: np.ndarray,
                      rng: np.random.Generator, n_samples: int) -> np.ndarray:
    posterior = policy_mod.encode(policy, obs)
    noise = rng.standard_normal((n_samples, policy.latent_dim))
    z = reparam_sample(posterior, noise).data
    from . import autodiff as ad
    with ad.no_grad():
        lp_post = policy_mod._batched_diag_logprob(
            ad.Tensor(posterior.mean[None, None]), ad.Tensor(posterior.log_var[None, None]),
            ad.Tensor(z[None]),
        ).data[0]
        lp_prior = log_prob_gmm(policy.prior(), z).data
    return lp_post - lp_prior


def rate_trajectory(policies: dict, episode_obs: dict, phases: list,
                    rng: np.random.Generator,
                    n_samples: int | None = None) -> RateTrajectory:
    """Per-step rate mean/std over MC samples for each modality.

    policies / episode_obs map Modality to a trained policy and an aligned
    list of observation grids.
    """
    lengths = {len(v) for v in episode_obs.values()}
    if len(lengths) != 1:
        raise ShapeError(f"observation streams have mismatched lengths: {lengths}")
    (length,) = lengths
    if len(phases) != length:
        raise ShapeError(f"{len(phases)} phase labels for {length} steps")
    means = {m: [] for m in policies}
    stds = {m: [] for m in policies}
    for t in range(length):
        for m, pol in policies.items():
            s = n_samples or pol.mc_samples
            rates = _per_sample_rates(pol, episode_obs[m][t], rng, s)
            means[m].append(float(rates.mean()))
            stds[m].append(float(rates.std()))
    return RateTrajectory(steps=list(range(length)), means=means, stds=stds, phases=list(phases))


def knn_by_kl(policy: ModalityPolicy, anchor_obs: np.ndarray, dataset: DemoDataset,
              k: int, posteriors: list | None = None) -> NeighborResult:
    """k nearest dataset frames by analytic KL(anchor posterior || frame posterior).

    Ties break by dataset index; pass precomputed posteriors to amortize
    encoding over many anchors.
    """
    if len(dataset) == 0:
        raise VibfuseError("empty dataset subset")
    if k > len(dataset):
        raise VibfuseError(f"k={k} exceeds subset size {len(dataset)}")
    anchor_post = policy_mod.encode(policy, anchor_obs)
    if posteriors is None:
        posteriors = encode_dataset(policy, dataset)
    kls = [kl_diag_diag(anchor_post, q) for q in posteriors]
    order = sorted(range(len(dataset)), key=lambda i: (kls[i], i))[:k]
    neighbors = [
        (i, kls[i], dataset.records[i].domain_style, dataset.records[i].phase) for i in order
    ]
    return NeighborResult(anchor_index=-1, neighbors=neighbors)


def encode_dataset(policy: ModalityPolicy, dataset: DemoDataset) -> list:
    return [policy_mod.encode(policy, r.obs[policy.modality].grid) for r in dataset.records]


def cross_domain_score(policy: ModalityPolicy, dataset: DemoDataset, k: int) -> float:
    """Fraction of anchors whose top-k neighbors (self excluded) include an
    opposite-domain frame with the anchor's phase label."""
    if len(dataset.domains()) < 2:
        raise VibfuseError("cross-domain score needs both domain tags in the subset")
    posteriors = encode_dataset(policy, dataset)
    n = len(dataset)
    means = np.stack([q.mean for q in posteriors])
    lvs = np.clip(np.stack([q.log_var for q in posteriors]), -10.0, 10.0)
    domains = np.array([r.domain_style.value for r in dataset.records])
    phases = np.array([r.phase.value for r in dataset.records])
    hits = 0
    inv_var = np.exp(-lvs)
    for a in range(n):
        # closed-form KL(a || each candidate), vectorized over candidates
        kls = 0.5 * (
            np.exp(lvs[a] - lvs) + (means - means[a]) ** 2 * inv_var - 1.0 + lvs - lvs[a]
        ).sum(axis=1)
        kls[a] = np.inf  # self excluded
        order = np.argsort(kls, kind="stable")[:k]
        if np.any((domains[order] != domains[a]) & (phases[order] == phases[a])):
            hits += 1
    return hits / n


def ood_auroc(rates_in: list, rates_out: list) -> float:
    """AUROC of the rate separating out-of-distribution (rates_out, the
    positive class) from in-distribution (rates_in) observations, via the
    rank statistic."""
    pos = np.asarray(rates_out, dtype=np.float64)
    neg = np.asarray(rates_in, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise VibfuseError("both rate lists must be nonempty")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    ranks[order] = np.arange(1, combined.size + 1)
    # midranks for ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


@dataclass
class AblationRow:
    label: str
    total: tuple  # (success, std)
    seen: tuple
    unseen: tuple


def _eval_split(controller, rooms, n_trials, rng):
    res = envsim.evaluate(controller, rooms, n_trials, rng)
    return res.success_rate, res.std


def ablation_report(multi: MultiModalPolicy, seen_rooms, unseen_rooms,
                    n_trials_per_split: int, rng: np.random.Generator) -> list:
    """Success tables for the fused policy and each forced single modality.

    Same checkpoints throughout; rows are fused / one per modality, columns
    Total / Seen / Unseen.
    """
    rows = []
    variants = [("fused", None)] + [
        (f"{p.modality.value}-only", p.modality) for p in multi.policies
    ]
    for label, force in variants:
        controller = fusion.fusion_controller(multi, force_modality=force)
        seen = _eval_split(controller, seen_rooms, n_trials_per_split,
                           np.random.default_rng(rng.integers(0, 2**63)))
        unseen = _eval_split(controller, unseen_rooms, n_trials_per_split,
                             np.random.default_rng(rng.integers(0, 2**63)))
        n_total = 2 * n_trials_per_split
        p_total = 0.5 * (seen[0] + unseen[0])
        rows.append(
            AblationRow(
                label=label,
                total=(p_total, envsim.bernoulli_std(p_total, n_total)),
                seen=seen,
                unseen=unseen,
            )
        )
    return rows
