"""Analysis module: rate trajectories, KL retrieval, AUROC, ablations."""

import itertools

import numpy as np
import pytest

from vibfuse import analysis, envsim, policy as policy_mod
from vibfuse.envsim import DemoDataset, DomainStyle, Modality, Phase
from vibfuse.errors import ShapeError, VibfuseError


def _tiny_policy(modality=Modality.DEPTH_LIKE, seed=0):
    return policy_mod.make_policy(modality, seed=seed, latent_dim=4,
                                  prior_components=3, anneal_steps=10)


def _tiny_dataset(n_demos=1, rooms=(0, 1)):
    return envsim.collect_demos(n_demos, rooms, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# rate_trajectory


def test_rate_trajectory_structure_and_determinism():
    pol = _tiny_policy()
    ds = _tiny_dataset()
    episode = [r for r in ds.records if r.episode_id == 0][:6]
    obs = {Modality.DEPTH_LIKE: [r.obs[Modality.DEPTH_LIKE].grid for r in episode]}
    phases = [r.phase for r in episode]
    a = analysis.rate_trajectory({Modality.DEPTH_LIKE: pol}, obs, phases,
                                 np.random.default_rng(1))
    assert a.steps == list(range(6))
    assert a.phases == phases
    assert len(a.means[Modality.DEPTH_LIKE]) == 6
    assert all(s >= 0.0 for s in a.stds[Modality.DEPTH_LIKE])
    b = analysis.rate_trajectory({Modality.DEPTH_LIKE: pol}, obs, phases,
                                 np.random.default_rng(1))
    assert a.means == b.means and a.stds == b.stds


def test_rate_trajectory_mean_matches_per_sample_oracle():
    # [DERIVED] mean/std of log q - log r over an injected noise block
    pol = _tiny_policy()
    ds = _tiny_dataset()
    grid = ds.records[0].obs[Modality.DEPTH_LIKE].grid
    traj = analysis.rate_trajectory(
        {Modality.DEPTH_LIKE: pol}, {Modality.DEPTH_LIKE: [grid]}, [Phase.APPROACH],
        np.random.default_rng(7), n_samples=64,
    )
    rates = analysis._per_sample_rates(pol, grid, np.random.default_rng(7), 64)
    assert traj.means[Modality.DEPTH_LIKE][0] == pytest.approx(rates.mean(), abs=1e-12)
    assert traj.stds[Modality.DEPTH_LIKE][0] == pytest.approx(rates.std(), abs=1e-12)


def test_rate_trajectory_mismatched_lengths_raise():
    pol = _tiny_policy()
    grid = _tiny_dataset().records[0].obs[Modality.DEPTH_LIKE].grid
    with pytest.raises(ShapeError):
        analysis.rate_trajectory({Modality.DEPTH_LIKE: pol},
                                 {Modality.DEPTH_LIKE: [grid, grid]}, [Phase.APPROACH],
                                 np.random.default_rng(0))


# ---------------------------------------------------------------------------
# knn_by_kl


def test_knn_anchor_from_dataset_retrieves_itself_first():
    pol = _tiny_policy()
    ds = _tiny_dataset()
    sub = DemoDataset(ds.records[:12])
    anchor = sub.records[5].obs[Modality.DEPTH_LIKE].grid
    result = analysis.knn_by_kl(pol, anchor, sub, k=3)
    idx0, kl0, _, _ = result.neighbors[0]
    assert idx0 == 5 and kl0 == pytest.approx(0.0, abs=1e-10)
    kls = [n[1] for n in result.neighbors]
    assert kls == sorted(kls)


def test_knn_k_equals_n_returns_full_permutation():
    pol = _tiny_policy()
    sub = DemoDataset(_tiny_dataset().records[:9])
    result = analysis.knn_by_kl(pol, sub.records[0].obs[Modality.DEPTH_LIKE].grid,
                                sub, k=9)
    assert sorted(n[0] for n in result.neighbors) == list(range(9))


def test_knn_k_too_large_raises():
    pol = _tiny_policy()
    sub = DemoDataset(_tiny_dataset().records[:4])
    with pytest.raises(VibfuseError):
        analysis.knn_by_kl(pol, sub.records[0].obs[Modality.DEPTH_LIKE].grid, sub, k=5)


def test_knn_empty_dataset_raises():
    pol = _tiny_policy()
    grid = _tiny_dataset().records[0].obs[Modality.DEPTH_LIKE].grid
    with pytest.raises(VibfuseError):
        analysis.knn_by_kl(pol, grid, DemoDataset([]), k=1)


# ---------------------------------------------------------------------------
# cross_domain_score


def test_cross_domain_score_k_equals_n_minus_one_is_one():
    # with every other frame in the neighbor set, any anchor whose phase
    # exists in the opposite domain scores a hit; the expert visits all
    # phases in both styles, so the score saturates at 1
    pol = _tiny_policy()
    ds = _tiny_dataset()
    sub = DemoDataset(ds.records[::9])
    assert len(sub.domains()) == 2
    assert analysis.cross_domain_score(pol, sub, k=len(sub) - 1) == 1.0


def test_cross_domain_score_bounded_and_monotone_in_k():
    pol = _tiny_policy()
    sub = DemoDataset(_tiny_dataset().records[::9])
    scores = [analysis.cross_domain_score(pol, sub, k) for k in (1, 4, len(sub) - 1)]
    assert all(0.0 <= s <= 1.0 for s in scores)
    assert scores == sorted(scores)


def test_cross_domain_score_single_domain_raises():
    pol = _tiny_policy()
    ds = _tiny_dataset()
    only_sim = DemoDataset([r for r in ds.records if r.domain_style == DomainStyle.SIM_STYLE])
    with pytest.raises(VibfuseError):
        analysis.cross_domain_score(pol, only_sim, k=2)


def test_cross_domain_score_matches_slow_reference():
    # [DERIVED] per-anchor loop over kl_diag_diag with explicit sorting
    from vibfuse.distributions import kl_diag_diag

    pol = _tiny_policy()
    sub = DemoDataset(_tiny_dataset().records[::17])
    k = 3
    got = analysis.cross_domain_score(pol, sub, k)
    posts = analysis.encode_dataset(pol, sub)
    hits = 0
    for a in range(len(sub)):
        kls = [np.inf if i == a else kl_diag_diag(posts[a], posts[i])
               for i in range(len(sub))]
        order = sorted(range(len(sub)), key=lambda i: (kls[i], i))[:k]
        ra = sub.records[a]
        if any(sub.records[i].domain_style != ra.domain_style
               and sub.records[i].phase == ra.phase for i in order):
            hits += 1
    assert got == pytest.approx(hits / len(sub), abs=1e-12)


# ---------------------------------------------------------------------------
# ood_auroc


def test_auroc_identical_distributions_is_half():
    assert analysis.ood_auroc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5)


def test_auroc_perfect_separation_is_one():
    # [DERIVED] clean rates (1, 2) vs corrupted rates (3, 4) -> 1.0
    assert analysis.ood_auroc([1.0, 2.0], [3.0, 4.0]) == 1.0


def test_auroc_partial_overlap():
    # [DERIVED] clean (1, 3) vs corrupted (2, 4): 3 of 4 pairs ordered -> 0.75
    assert analysis.ood_auroc([1.0, 3.0], [2.0, 4.0]) == 0.75


def test_auroc_inverted_scores_is_zero():
    assert analysis.ood_auroc([3.0, 4.0], [1.0, 2.0]) == 0.0


def test_auroc_empty_input_raises():
    with pytest.raises(VibfuseError):
        analysis.ood_auroc([], [1.0])


def test_auroc_matches_brute_force_pair_count():
    # [DERIVED] P(out > in) + 0.5 P(tie) over all pairs, sizes <= 100
    rng = np.random.default_rng(0)
    for trial in range(20):
        n_in, n_out = rng.integers(2, 100, size=2)
        rates_in = np.round(rng.normal(0, 1, n_in), 1)  # rounding forces ties
        rates_out = np.round(rng.normal(0.5, 1, n_out), 1)
        want = sum(
            1.0 if o > i else (0.5 if o == i else 0.0)
            for o, i in itertools.product(rates_out, rates_in)
        ) / (n_in * n_out)
        assert analysis.ood_auroc(rates_in, rates_out) == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# ablation_report


def test_ablation_report_structure():
    pols = [_tiny_policy(Modality.RGB_LIKE), _tiny_policy(Modality.DEPTH_LIKE)]
    multi = policy_mod.MultiModalPolicy(policies=pols,
                                        fusion_mode=policy_mod.FusionMode.RATE_LINEAR)
    rows = analysis.ablation_report(multi, (0,), (6,), 2, np.random.default_rng(0))
    assert [r.label for r in rows] == ["fused", "rgb-only", "depth-only"]
    for row in rows:
        for cell in (row.total, row.seen, row.unseen):
            rate, std = cell
            assert 0.0 <= rate <= 1.0 and std >= 0.0
        assert row.total[0] == pytest.approx(0.5 * (row.seen[0] + row.unseen[0]), abs=1e-12)
