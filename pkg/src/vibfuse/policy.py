"""Per-modality stochastic behavior-cloning policies.

Each modality owns a stochastic conv encoder (Gaussian posterior over the
latent space), a 2-layer MLP action decoder, and a learned mixture-of-
Gaussians marginal. The training objective is mean Huber imitation loss
plus a linearly annealed rate penalty (the KL of the posterior from the
marginal, estimated by Monte Carlo). Inference executes the mean decoded
action over the sample set; the per-input rate doubles as an uncertainty
score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import envsim
from .autodiff import (
    Activation,
    Affine,
    Conv2d,
    Flatten,
    Graph,
    OptimizerState,
    ParameterSet,
    Tensor,
)
from .distributions import (
    _LOG_2PI,
    DiagGaussian,
    GmmPrior,
    log_prob_gmm,
    reparam_sample,
)
from .envsim import DomainStyle, Modality
from .errors import ConfigError, ShapeError
from .rng import named_stream


class FusionMode(Enum):
    SINGLE = "single"
    CONCAT_FUSION = "cf"
    RATE_LINEAR = "linear"
    RATE_SOFTMAX = "softmax"


@dataclass
class ModalityPolicy:
    modality: Modality
    obs_shape: tuple
    action_dim: int
    latent_dim: int
    mc_samples: int
    beta_target: float
    anneal_steps: int
    encoder_graph: Graph
    decoder_graph: Graph
    params: ParameterSet
    huber_delta: float = 1.0

    def prior(self, get=None) -> GmmPrior:
        get = get or self.params.__getitem__
        return GmmPrior.from_params(get, "prior")


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 1e-3
    eval_every: int = 0  # 0 disables in-loop sim evals
    domains: tuple = (DomainStyle.SIM_STYLE, DomainStyle.REAL_STYLE)
    eval_rooms: tuple = envsim.SEEN_ROOMS
    eval_episodes: int = 20
    include_rate: bool = True  # False drops the rate term entirely (debug)
    mirror_augment: bool = True  # exploit y-mirror equivariance of the dynamics


@dataclass
class MultiModalPolicy:
    policies: list  # of ModalityPolicy
    fusion_mode: FusionMode
    temperature: float = 1.0
    shared_decoder_graph: Graph | None = None
    shared_decoder_params: ParameterSet | None = None


def _encoder_graph(obs_shape: tuple, latent_dim: int) -> Graph:
    return Graph(
        input_shape=tuple(obs_shape),
        layers=(
            Conv2d("enc.c1", out_channels=16, kernel=3, stride=2),
            Activation("relu"),
            Conv2d("enc.c2", out_channels=32, kernel=3, stride=2),
            Activation("relu"),
            Flatten(),
            Affine("enc.f1", 192),
            Activation("relu"),
            Affine("enc.f2", 2 * latent_dim),
        ),
    )


def _decoder_graph(latent_dim: int, action_dim: int, hidden: int = 64,
                   name: str = "dec") -> Graph:
    return Graph(
        input_shape=(latent_dim,),
        layers=(
            Affine(f"{name}.f1", hidden),
            Activation("relu"),
            Affine(f"{name}.f2", action_dim),
        ),
    )


def make_policy(
    modality: Modality,
    seed: int = 0,
    latent_dim: int = 64,
    prior_components: int = 512,
    mc_samples: int = 8,
    beta_target: float = 1e-3,
    anneal_steps: int = 3000,
    action_dim: int = 4,
    obs_shape: tuple | None = None,
) -> ModalityPolicy:
    if mc_samples < 1:
        raise ConfigError(f"mc_samples must be >= 1, got {mc_samples}")
    if beta_target < 0:
        raise ConfigError(f"beta_target must be >= 0, got {beta_target}")
    obs_shape = tuple(obs_shape) if obs_shape else envsim.obs_shape(modality)
    enc = _encoder_graph(obs_shape, latent_dim)
    dec = _decoder_graph(latent_dim, action_dim)
    init_rng = named_stream(seed, "init", modality.value)
    params = ParameterSet()
    for k, v in enc.init_params(init_rng).items():
        params.add(k, v)
    for k, v in dec.init_params(init_rng).items():
        params.add(k, v)
    # start with a tight posterior so the latent carries signal from step one
    params["enc.f2.b"] = np.concatenate([np.zeros(latent_dim), np.full(latent_dim, -5.0)])
    prior = GmmPrior.init(named_stream(seed, "prior-init", modality.value),
                          n_components=prior_components, dim=latent_dim)
    for k, v in prior.params("prior").items():
        params.add(k, v)
    return ModalityPolicy(
        modality=modality,
        obs_shape=obs_shape,
        action_dim=action_dim,
        latent_dim=latent_dim,
        mc_samples=mc_samples,
        beta_target=beta_target,
        anneal_steps=anneal_steps,
        encoder_graph=enc,
        decoder_graph=dec,
        params=params,
    )


def _posterior_t(policy: ModalityPolicy, get, obs_batch) -> tuple[Tensor, Tensor]:
    out = policy.encoder_graph.apply(get, obs_batch)
    d = policy.latent_dim
    return out[:, :d], out[:, d:]


def encode(policy: ModalityPolicy, obs: np.ndarray) -> DiagGaussian:
    """Posterior parameters for one observation; deterministic given params."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != policy.obs_shape:
        raise ShapeError(f"obs shape {obs.shape} != declared {policy.obs_shape}")
    with ad.no_grad():
        mean, lv = _posterior_t(policy, policy.params.__getitem__, obs[None])
    return DiagGaussian(mean.data[0], lv.data[0])


def beta_at(step: int, beta_target: float, anneal_steps: int) -> float:
    """Linear ramp from 0 to beta_target over the first anneal_steps."""
    if anneal_steps <= 0:
        raise ConfigError(f"anneal_steps must be positive, got {anneal_steps}")
    return beta_target * min(1.0, step / anneal_steps)


def _batched_diag_logprob(mean_b: Tensor, lv_b: Tensor, z: Tensor) -> Tensor:
    """log N(z; mean, diag var) with mean/lv [B, 1, d] against z [B, S, d]."""
    lv_b = ad.clamp(lv_b, -10.0, 10.0)
    quad = ad.square(z - mean_b) * ad.exp(-lv_b)
    return -0.5 * ad.reduce_sum(quad + lv_b + _LOG_2PI, axis=-1)


def _loss_t(policy: ModalityPolicy, get, obs, actions, noise, beta: float,
            include_rate: bool = True):
    """Differentiable (total, bc, rate) for one minibatch.

    noise: [B, S, d] standard-normal draws, injected for determinism.
    """
    b, s, d = noise.shape
    mean, lv = _posterior_t(policy, get, obs)
    mean_b = ad.reshape(mean, (b, 1, d))
    lv_b = ad.reshape(lv, (b, 1, d))
    std_b = ad.exp(0.5 * ad.clamp(lv_b, -10.0, 10.0))
    z = mean_b + std_b * Tensor(noise)  # [B, S, d]
    z_flat = ad.reshape(z, (b * s, d))
    decoded = policy.decoder_graph.apply(get, z_flat)  # [B*S, A]
    target = np.repeat(np.asarray(actions, dtype=np.float64), s, axis=0)
    bc = ad.huber(decoded - target, policy.huber_delta)
    if include_rate:
        lp_post = _batched_diag_logprob(mean_b, lv_b, z)  # [B, S]
        lp_prior = ad.reshape(log_prob_gmm(policy.prior(get), z_flat), (b, s))
        rate = ad.reduce_mean(lp_post - lp_prior)
        total = bc + beta * rate
    else:
        rate = Tensor(0.0)
        total = bc
    return total, bc, rate


def loss(policy: ModalityPolicy, batch, step: int, rng: np.random.Generator):
    """(total, bc, rate) on a batch of (obs [B, ...], actions [B, A])."""
    obs, actions = batch
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if obs.shape[0] == 0:
        raise ShapeError("empty batch")
    if actions.shape != (obs.shape[0], policy.action_dim):
        raise ShapeError(
            f"actions shape {actions.shape} != ({obs.shape[0]}, {policy.action_dim})"
        )
    noise = rng.standard_normal((obs.shape[0], policy.mc_samples, policy.latent_dim))
    beta = beta_at(step, policy.beta_target, policy.anneal_steps)
    with ad.no_grad():
        total, bc, rate = _loss_t(policy, policy.params.__getitem__, obs, actions, noise, beta)
    return float(total), float(bc), float(rate)


@dataclass
class Checkpoint:
    step: int
    sim_success: float
    params: ParameterSet


@dataclass
class TrainResult:
    policy: ModalityPolicy
    log: list  # dicts: step, total, bc, rate, beta, sim_success (or None)
    checkpoints: list  # all eval-time snapshots, in step order


def select_checkpoints(checkpoints: list, keep: int = 3) -> list:
    """Highest sim-success snapshots; ties broken toward later steps."""
    ranked = sorted(checkpoints, key=lambda c: (c.sim_success, c.step), reverse=True)
    return ranked[:keep]


def _policy_controller(policy: ModalityPolicy, params: ParameterSet):
    snap = replace(policy, params=params)

    def controller(obs, rng):
        return predict_mean_action(snap, obs[policy.modality].grid, rng)

    return controller


def train(policy: ModalityPolicy, dataset: envsim.DemoDataset,
          config: TrainConfig) -> TrainResult:
    """Joint Adam training of encoder, decoder, and prior; seeded end-to-end."""
    if config.total_steps > 0 and config.total_steps <= policy.anneal_steps:
        raise ConfigError(
            f"total_steps {config.total_steps} must exceed anneal_steps {policy.anneal_steps}"
        )
    records = [r for r in dataset.records if r.domain_style in config.domains]
    if not records:
        raise ConfigError("dataset has no records in the requested domains")
    sub = envsim.DemoDataset(records)
    obs_all, act_all = sub.arrays(policy.modality)
    if obs_all.shape[1:] != policy.obs_shape:
        raise ShapeError(
            f"dataset obs shape {obs_all.shape[1:]} != policy obs shape {policy.obs_shape}"
        )
    if config.mirror_augment:
        mirrored = np.stack(
            [envsim.mirror_obs_grid(o, policy.modality) for o in obs_all]
        )
        obs_all = np.concatenate([obs_all, mirrored])
        act_all = np.concatenate(
            [act_all, np.stack([envsim.mirror_action(a) for a in act_all])]
        )
    params = policy.params.copy()
    opt = OptimizerState.init(params, learning_rate=config.learning_rate)
    data_rng = named_stream(config.seed, "batches", policy.modality.value)
    noise_rng = named_stream(config.seed, "mc-noise", policy.modality.value)
    log, checkpoints = [], []
    n = obs_all.shape[0]
    for step_i in range(config.total_steps):
        idx = data_rng.integers(0, n, size=config.batch_size)
        noise = noise_rng.standard_normal(
            (config.batch_size, policy.mc_samples, policy.latent_dim)
        )
        beta = beta_at(step_i, policy.beta_target, policy.anneal_steps)
        lv = ad.leaves(params)
        total, bc, rate = _loss_t(
            policy, lambda k: lv[k], obs_all[idx], act_all[idx], noise, beta,
            include_rate=config.include_rate,
        )
        total.backward()
        grads = ParameterSet()
        for k, v in params.items():
            g = lv[k].grad
            grads.add(k, np.zeros_like(v) if g is None else g)
        params, opt = adam_update(params, grads, opt)
        entry = {
            "step": step_i,
            "total": float(total),
            "bc": float(bc),
            "rate": float(rate),
            "beta": beta,
            "sim_success": None,
        }
        if config.eval_every and (step_i + 1) % config.eval_every == 0:
            eval_rng = named_stream(config.seed, "sim-eval", policy.modality.value, str(step_i))
            result = envsim.evaluate(
                _policy_controller(policy, params), config.eval_rooms,
                config.eval_episodes, eval_rng,
            )
            entry["sim_success"] = result.success_rate
            checkpoints.append(
                Checkpoint(step=step_i, sim_success=result.success_rate, params=params.copy())
            )
        log.append(entry)
    return TrainResult(policy=replace(policy, params=params), log=log, checkpoints=checkpoints)


# thin alias so the training loop reads naturally
adam_update = ad.adam_step


def sample_actions_and_rate(policy: ModalityPolicy, obs: np.ndarray,
                            rng: np.random.Generator):
    """One sampling pass shared by action prediction and rate scoring.

    Returns (mean action [A], rate in nats, posterior).
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != policy.obs_shape:
        raise ShapeError(f"obs shape {obs.shape} != declared {policy.obs_shape}")
    with ad.no_grad():
        posterior = encode(policy, obs)
        noise = rng.standard_normal((policy.mc_samples, policy.latent_dim))
        z = reparam_sample(posterior, noise)
        decoded = policy.decoder_graph.apply(policy.params, z.data)
        action = decoded.data.mean(axis=0)
        lp_post = _batched_diag_logprob(
            Tensor(posterior.mean[None, None]), Tensor(posterior.log_var[None, None]),
            Tensor(z.data[None]),
        ).data[0]
        lp_prior = log_prob_gmm(policy.prior(), z.data).data
        rate = float(np.mean(lp_post - lp_prior))
    return action, rate, posterior


def predict_mean_action(policy: ModalityPolicy, obs: np.ndarray,
                        rng: np.random.Generator,
                        n_samples: int | None = None) -> np.ndarray:
    """Average decoded action over reparameterized posterior samples."""
    if n_samples is not None and n_samples != policy.mc_samples:
        policy = replace(policy, mc_samples=n_samples)
    action, _, _ = sample_actions_and_rate(policy, obs, rng)
    return action


def instance_rate(policy: ModalityPolicy, obs: np.ndarray,
                  rng: np.random.Generator,
                  n_samples: int | None = None) -> float:
    """Monte-Carlo rate of one observation against the learned prior, nats."""
    if n_samples is not None and n_samples != policy.mc_samples:
        policy = replace(policy, mc_samples=n_samples)
    _, rate, _ = sample_actions_and_rate(policy, obs, rng)
    return rate


# ---------------------------------------------------------------------------
# concatenation-fusion variant (shared decoder over joined latents)


def make_concat_policy(policies: list, seed: int = 0, hidden: int = 64) -> MultiModalPolicy:
    total_latent = sum(p.latent_dim for p in policies)
    action_dim = policies[0].action_dim
    dec = _decoder_graph(total_latent, action_dim, hidden=hidden, name="cfdec")
    dec_params = dec.init_params(named_stream(seed, "cf-decoder-init"))
    return MultiModalPolicy(
        policies=list(policies),
        fusion_mode=FusionMode.CONCAT_FUSION,
        shared_decoder_graph=dec,
        shared_decoder_params=dec_params,
    )


def train_concat(multi: MultiModalPolicy, dataset: envsim.DemoDataset,
                 config: TrainConfig) -> MultiModalPolicy:
    """Train per-modality encoders/priors and the shared decoder jointly.

    Loss: Huber on the shared decode of concatenated samples, plus the
    annealed sum of per-modality rates.
    """
    if multi.fusion_mode != FusionMode.CONCAT_FUSION:
        raise ConfigError("train_concat requires a CONCAT_FUSION policy")
    records = [r for r in dataset.records if r.domain_style in config.domains]
    sub = envsim.DemoDataset(records)
    per_mod = [sub.arrays(p.modality) for p in multi.policies]
    actions_all = per_mod[0][1]
    n = actions_all.shape[0]

    params = ParameterSet()
    for i, p in enumerate(multi.policies):
        for k, v in p.params.items():
            params.add(f"m{i}.{k}", v.copy())
    for k, v in multi.shared_decoder_params.items():
        params.add(k, v.copy())

    opt = OptimizerState.init(params, learning_rate=config.learning_rate)
    data_rng = named_stream(config.seed, "batches", "cf")
    noise_rng = named_stream(config.seed, "mc-noise", "cf")
    anneal = multi.policies[0].anneal_steps
    beta_target = multi.policies[0].beta_target
    s = multi.policies[0].mc_samples

    for step_i in range(config.total_steps):
        idx = data_rng.integers(0, n, size=config.batch_size)
        beta = beta_at(step_i, beta_target, anneal)
        lv = ad.leaves(params)
        zs, rates = [], []
        b = config.batch_size
        for i, p in enumerate(multi.policies):
            obs_i = per_mod[i][0][idx]
            d = p.latent_dim
            noise = noise_rng.standard_normal((b, s, d))
            get = lambda k, i=i: lv[f"m{i}.{k}"]
            mean, lvar = _posterior_t(p, get, obs_i)
            mean_b = ad.reshape(mean, (b, 1, d))
            lv_b = ad.reshape(lvar, (b, 1, d))
            z = mean_b + ad.exp(0.5 * ad.clamp(lv_b, -10, 10)) * Tensor(noise)
            zs.append(z)
            lp_post = _batched_diag_logprob(mean_b, lv_b, z)
            lp_prior = ad.reshape(
                log_prob_gmm(p.prior(get), ad.reshape(z, (b * s, d))), (b, s)
            )
            rates.append(ad.reduce_mean(lp_post - lp_prior))
        z_cat = ad.concat(zs, axis=-1)
        total_latent = z_cat.data.shape[-1]
        decoded = multi.shared_decoder_graph.apply(
            lambda k: lv[k], ad.reshape(z_cat, (b * s, total_latent))
        )
        target = np.repeat(actions_all[idx], s, axis=0)
        bc = ad.huber(decoded - target, multi.policies[0].huber_delta)
        total = bc
        for r in rates:
            total = total + beta * r
        total.backward()
        grads = ParameterSet()
        for k, v in params.items():
            g = lv[k].grad
            grads.add(k, np.zeros_like(v) if g is None else g)
        params, opt = adam_update(params, grads, opt)

    new_policies = []
    for i, p in enumerate(multi.policies):
        ps = ParameterSet({k: params[f"m{i}.{k}"] for k in p.params})
        new_policies.append(replace(p, params=ps))
    dec_params = ParameterSet({k: params[k] for k in multi.shared_decoder_params})
    return replace(multi, policies=new_policies, shared_decoder_params=dec_params)


def concat_predict(multi: MultiModalPolicy, obs_per_modality: dict,
                   rng: np.random.Generator):
    """Mean shared-decoder action plus per-modality rates for CF policies."""
    with ad.no_grad():
        zs, rates = [], []
        s = multi.policies[0].mc_samples
        for p in multi.policies:
            obs = obs_per_modality[p.modality].grid
            posterior = encode(p, obs)
            noise = rng.standard_normal((s, p.latent_dim))
            z = reparam_sample(posterior, noise).data
            zs.append(z)
            lp_post = _batched_diag_logprob(
                Tensor(posterior.mean[None, None]), Tensor(posterior.log_var[None, None]),
                Tensor(z[None]),
            ).data[0]
            lp_prior = log_prob_gmm(p.prior(), z).data
            rates.append(float(np.mean(lp_post - lp_prior)))
        z_cat = np.concatenate(zs, axis=-1)
        decoded = multi.shared_decoder_graph.apply(multi.shared_decoder_params, z_cat)
        return decoded.data.mean(axis=0), rates
