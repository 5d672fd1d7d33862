"""Command-line pipeline: collect, train, eval, analyze, sweep-beta.

Configuration comes from an optional JSON file plus flag overrides; every
run persists its fully-resolved config next to its outputs. Unknown config
keys are errors. VIBFUSE_THREADS caps rollout parallelism (default 1);
results are identical at any thread count because every episode is seeded
up front.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, envsim, fusion, io_formats, policy as policy_mod
from .envsim import CorruptionKind, DomainStyle, Modality
from .errors import ConfigError, VibfuseError
from .policy import FusionMode, TrainConfig
from .rng import named_stream

_MODALITY_FLAG = {"rgb": [Modality.RGB_LIKE], "depth": [Modality.DEPTH_LIKE],
                  "both": [Modality.RGB_LIKE, Modality.DEPTH_LIKE]}
_FUSION_FLAG = {"single": FusionMode.SINGLE, "cf": FusionMode.CONCAT_FUSION,
                "linear": FusionMode.RATE_LINEAR, "softmax": FusionMode.RATE_SOFTMAX}


def thread_count() -> int:
    raw = os.environ.get("VIBFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VIBFUSE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"VIBFUSE_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# configuration plumbing

_DEFAULTS = {
    "collect": {
        "seed": 0,
        "out": "out/collect",
        "episodes_per_domain": 100,
        "rooms": list(envsim.SEEN_ROOMS),
        "noise_sigma": 0.1,
    },
    "train": {
        "seed": 0,
        "seeds": None,  # list overrides the single seed
        "out": "out/train",
        "dataset": "out/collect/dataset.vibd",
        "modality": "both",
        "total_steps": 9000,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "eval_every": 1500,
        "eval_episodes": 20,
        "latent_dim": 16,
        "prior_components": 32,
        "mc_samples": 8,
        "beta_target": 1e-3,
        "anneal_steps": 300,
        "fusion": "single",  # "cf" trains the concat-fusion baseline instead
    },
    "eval": {
        "seed": 0,
        "out": "out/eval",
        "checkpoints": "out/train",
        "modality": "both",
        "fusion": "softmax",
        "temperature": 1.0,
        "seen_rooms": list(envsim.SEEN_ROOMS),
        "unseen_rooms": list(envsim.UNSEEN_ROOMS),
        "trials_per_room": 30,
        "corruption": None,  # "kind:severity" applied to the rgb stream
        "train_seed": 0,
    },
    "analyze": {
        "seed": 0,
        "out": "out/analyze",
        "checkpoints": "out/train",
        "dataset": "out/collect/dataset.vibd",
        "modality": "both",
        "knn_k": 5,
        "knn_anchors": 8,
        "cross_domain_k": 5,
        "cross_domain_frames": 400,
        "auroc_pairs": 250,
        "corruption": "heavy_noise:0.7",
        "ablation_trials": 30,
        "train_seed": 0,
    },
    "sweep-beta": {
        "seed": 0,
        "out": "out/sweep",
        "dataset": "out/collect/dataset.vibd",
        "modality": "depth",
        "betas": [1e-4, 1e-3, 1e-2],
        "total_steps": 9000,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "eval_every": 1500,
        "eval_episodes": 20,
        "latent_dim": 16,
        "prior_components": 32,
        "mc_samples": 8,
        "anneal_steps": 300,
    },
}


def resolve_config(command: str, config_path, overrides: dict) -> dict:
    cfg = dict(_DEFAULTS[command])
    if config_path:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        cfg.update(file_cfg)
    for k, v in overrides.items():
        if v is not None:
            if k not in cfg:
                raise ConfigError(f"unknown override {k!r} for {command}")
            cfg[k] = v
    return cfg


def _persist_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_corruption(spec: str | None):
    if spec is None:
        return None
    try:
        kind_str, severity_str = spec.split(":")
        kind = CorruptionKind(kind_str)
        severity = float(severity_str)
    except (ValueError, KeyError) as exc:
        raise ConfigError(
            f"corruption must look like kind:severity with kind in "
            f"{[k.value for k in CorruptionKind]}, got {spec!r}"
        ) from exc
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"corruption severity must be in [0, 1], got {severity}")
    return kind, severity


# ---------------------------------------------------------------------------
# model plumbing shared by eval / analyze


def _policy_from_cfg(cfg: dict, modality: Modality, seed: int):
    return policy_mod.make_policy(
        modality,
        seed=seed,
        latent_dim=cfg["latent_dim"],
        prior_components=cfg["prior_components"],
        mc_samples=cfg["mc_samples"],
        beta_target=cfg["beta_target"],
        anneal_steps=cfg["anneal_steps"],
    )


def _checkpoint_paths(ckpt_dir: Path, modality: Modality, seed: int) -> list:
    paths = sorted(ckpt_dir.glob(f"{modality.value}_seed{seed}_top*.vibc"))
    if not paths:
        raise VibfuseError(
            f"no checkpoints matching {modality.value}_seed{seed}_top*.vibc in {ckpt_dir}"
        )
    return paths


def load_policy_bank(ckpt_dir: Path, modality: Modality, seed: int):
    """(template policy, list of parameter snapshots) from top-k checkpoints."""
    snapshots, template = [], None
    for path in _checkpoint_paths(ckpt_dir, modality, seed):
        header, params = io_formats.read_checkpoint(path)
        if template is None:
            template = policy_mod.make_policy(
                modality,
                seed=seed,
                latent_dim=header.latent_dim,
                prior_components=params["prior.logits"].shape[0],
                mc_samples=header.mc_samples,
                beta_target=header.beta_target,
                anneal_steps=header.anneal_steps,
            )
        snapshots.append(io_formats.apply_checkpoint(template, params).params)
    return template, snapshots


def bank_controller(banks: dict, fusion_mode: FusionMode, temperature: float,
                    episode_rng: np.random.Generator, shared_decoder=None):
    """Controller sampling one retained checkpoint per modality per episode."""
    from dataclasses import replace

    chosen = [
        replace(tpl, params=snaps[episode_rng.integers(0, len(snaps))])
        for tpl, snaps in banks.values()
    ]
    multi = policy_mod.MultiModalPolicy(
        policies=chosen, fusion_mode=fusion_mode, temperature=temperature
    )
    if shared_decoder is not None:
        graph, dec_params = shared_decoder
        multi = replace(multi, shared_decoder_graph=graph, shared_decoder_params=dec_params)
    return fusion.fusion_controller(multi)


def _run_episode(make_controller, room: int, episode_seed: int,
                 corruption, domain_style=DomainStyle.SIM_STYLE) -> bool:
    config = envsim.WorldConfig.for_room(room, domain_style)
    rng = np.random.default_rng(episode_seed)
    controller = make_controller(rng)
    state = envsim.reset(config, rng)
    while state.t < config.max_steps and not envsim.is_success(state):
        obs = {
            m: envsim.render(state, m, domain_style, rng, config)
            for m in (Modality.RGB_LIKE, Modality.DEPTH_LIKE)
        }
        if corruption is not None:
            kind, severity = corruption
            obs[Modality.RGB_LIKE] = envsim.corrupt(
                obs[Modality.RGB_LIKE], kind, severity, rng
            )
        state = envsim.step(state, controller(obs, rng), config)
    return envsim.is_success(state)


def _run_suite(make_controller, rooms, trials_per_room: int, seed: int,
               corruption=None) -> envsim.EvalResult:
    """Pre-seeded episode suite; parallel over episodes when allowed."""
    jobs = []
    seed_rng = named_stream(seed, "eval-suite")
    for room in rooms:
        for _ in range(trials_per_room):
            jobs.append((room, int(seed_rng.integers(0, 2**63))))
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            successes = list(
                pool.map(
                    lambda j: _run_episode(make_controller, j[0], j[1], corruption), jobs
                )
            )
    else:
        successes = [_run_episode(make_controller, r, s, corruption) for r, s in jobs]
    p = float(np.mean(successes))
    return envsim.EvalResult(
        success_rate=p, std=envsim.bernoulli_std(p, len(jobs)), successes=successes
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _persist_config(cfg, out_dir)
    rng = named_stream(cfg["seed"], "collect")
    dataset = envsim.collect_demos(
        cfg["episodes_per_domain"], cfg["rooms"], rng, noise_sigma=cfg["noise_sigma"]
    )
    path = out_dir / "dataset.vibd"
    io_formats.write_dataset(path, dataset)
    per_domain = {
        style.value: len({r.episode_id for r in dataset.records if r.domain_style == style})
        for style in DomainStyle
    }
    print(f"wrote {path}: {len(dataset)} records, episodes per domain {per_domain}")
    return 0


def _train_one(cfg: dict, modality: Modality, seed: int, dataset, out_dir: Path) -> None:
    pol = _policy_from_cfg(cfg, modality, seed)
    tc = TrainConfig(
        total_steps=cfg["total_steps"],
        batch_size=cfg["batch_size"],
        seed=seed,
        learning_rate=cfg["learning_rate"],
        eval_every=cfg["eval_every"],
        eval_episodes=cfg["eval_episodes"],
    )
    result = policy_mod.train(pol, dataset, tc)
    log_path = out_dir / f"{modality.value}_seed{seed}_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "bc", "rate", "beta", "sim_success"])
        for row in result.log:
            writer.writerow(
                [row["step"], row["total"], row["bc"], row["rate"], row["beta"],
                 "" if row["sim_success"] is None else row["sim_success"]]
            )
    kept = policy_mod.select_checkpoints(result.checkpoints)
    for i, ck in enumerate(kept):
        header = io_formats.checkpoint_header_for(pol, ck.step, ck.sim_success)
        io_formats.write_checkpoint(
            out_dir / f"{modality.value}_seed{seed}_top{i}.vibc", header, ck.params
        )
    best = kept[0].sim_success if kept else float("nan")
    print(
        f"trained {modality.value} seed {seed}: kept {len(kept)} checkpoints, "
        f"best sim success {best:.2f}"
    )


def _train_cf(cfg: dict, seed: int, dataset, out_dir: Path) -> None:
    singles = [
        _policy_from_cfg(cfg, m, seed) for m in (Modality.RGB_LIKE, Modality.DEPTH_LIKE)
    ]
    multi = policy_mod.make_concat_policy(singles, seed=seed)
    tc = TrainConfig(
        total_steps=cfg["total_steps"],
        batch_size=cfg["batch_size"],
        seed=seed,
        learning_rate=cfg["learning_rate"],
    )
    multi = policy_mod.train_concat(multi, dataset, tc)
    for p in multi.policies:
        header = io_formats.checkpoint_header_for(p, cfg["total_steps"] - 1, float("nan"))
        io_formats.write_checkpoint(
            out_dir / f"cf_{p.modality.value}_seed{seed}.vibc", header, p.params
        )
    dec_header = io_formats.CheckpointHeader(
        modality_id=io_formats.SHARED_DECODER_ID,
        latent_dim=sum(p.latent_dim for p in multi.policies),
        mc_samples=multi.policies[0].mc_samples,
        beta_target=multi.policies[0].beta_target,
        anneal_steps=multi.policies[0].anneal_steps,
        step=cfg["total_steps"] - 1,
        sim_success=float("nan"),
    )
    io_formats.write_checkpoint(
        out_dir / f"cf_decoder_seed{seed}.vibc", dec_header, multi.shared_decoder_params
    )
    print(f"trained cf seed {seed}: wrote encoder and shared-decoder checkpoints")


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _persist_config(cfg, out_dir)
    if not Path(cfg["dataset"]).exists():
        print(f"error: dataset {cfg['dataset']} does not exist", file=sys.stderr)
        return 1
    dataset = io_formats.read_dataset(cfg["dataset"])
    seeds = cfg["seeds"] if cfg["seeds"] else [cfg["seed"]]
    if not seeds:
        raise ConfigError("seeds list is empty")
    for seed in seeds:
        if cfg["fusion"] == "cf":
            _train_cf(cfg, seed, dataset, out_dir)
        else:
            for modality in _MODALITY_FLAG[cfg["modality"]]:
                _train_one(cfg, modality, seed, dataset, out_dir)
    return 0


def load_cf_bundle(ckpt_dir: Path, seed: int):
    """CF MultiModalPolicy reassembled from its three checkpoint files."""
    policies = []
    for m in (Modality.RGB_LIKE, Modality.DEPTH_LIKE):
        path = ckpt_dir / f"cf_{m.value}_seed{seed}.vibc"
        if not path.exists():
            raise VibfuseError(f"missing CF checkpoint {path}")
        header, params = io_formats.read_checkpoint(path)
        tpl = policy_mod.make_policy(
            m,
            seed=seed,
            latent_dim=header.latent_dim,
            prior_components=params["prior.logits"].shape[0],
            mc_samples=header.mc_samples,
            beta_target=header.beta_target,
            anneal_steps=header.anneal_steps,
        )
        policies.append(io_formats.apply_checkpoint(tpl, params))
    multi = policy_mod.make_concat_policy(policies, seed=seed)
    _, dec_params = io_formats.read_checkpoint(ckpt_dir / f"cf_decoder_seed{seed}.vibc")
    from .autodiff import ParameterSet

    expected = {k: v.shape for k, v in multi.shared_decoder_params.items()}
    if {k: v.shape for k, v in dec_params.items()} != expected:
        raise VibfuseError("CF decoder checkpoint does not match the encoder pair")
    from dataclasses import replace

    return replace(multi, shared_decoder_params=ParameterSet(dec_params))


def cmd_eval(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _persist_config(cfg, out_dir)
    ckpt_dir = Path(cfg["checkpoints"])
    fusion_mode = _FUSION_FLAG[cfg["fusion"]]
    corruption = _parse_corruption(cfg["corruption"])
    seed = cfg["seed"]
    try:
        if fusion_mode == FusionMode.CONCAT_FUSION:
            multi = load_cf_bundle(ckpt_dir, cfg["train_seed"])

            def make_controller(rng, multi=multi):
                return fusion.fusion_controller(multi)
        else:
            modalities = _MODALITY_FLAG[cfg["modality"]]
            if fusion_mode == FusionMode.SINGLE and len(modalities) != 1:
                raise ConfigError("--fusion single needs --modality rgb or depth")
            banks = {
                m: load_policy_bank(ckpt_dir, m, cfg["train_seed"]) for m in modalities
            }

            def make_controller(rng, banks=banks):
                return bank_controller(banks, fusion_mode, cfg["temperature"], rng)

    except VibfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    rows = []
    splits = [("seen", cfg["seen_rooms"]), ("unseen", cfg["unseen_rooms"])]
    all_successes = []
    for label, rooms in splits:
        res = _run_suite(
            make_controller, rooms, cfg["trials_per_room"], seed, corruption=corruption
        )
        rows.append((label, res.success_rate, res.std, len(res.successes)))
        all_successes.extend(res.successes)
    p_total = float(np.mean(all_successes))
    rows.insert(0, ("total", p_total, envsim.bernoulli_std(p_total, len(all_successes)),
                    len(all_successes)))

    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "success", "std", "n_trials"])
        writer.writerows(rows)
    summary = {
        "fusion": cfg["fusion"],
        "corruption": cfg["corruption"],
        "splits": {label: {"success": s, "std": std, "n": n} for label, s, std, n in rows},
    }
    with open(out_dir / "results.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for label, s, std, n in rows:
        print(f"{label}: {s:.3f} +/- {std:.4f} over {n} trials")
    return 0


def cmd_analyze(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _persist_config(cfg, out_dir)
    ckpt_dir = Path(cfg["checkpoints"])
    if not Path(cfg["dataset"]).exists():
        print(f"error: dataset {cfg['dataset']} does not exist", file=sys.stderr)
        return 1
    dataset = io_formats.read_dataset(cfg["dataset"])
    seed = cfg["seed"]
    try:
        banks = {
            m: load_policy_bank(ckpt_dir, m, cfg["train_seed"])
            for m in _MODALITY_FLAG[cfg["modality"]]
        }
    except VibfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    from dataclasses import replace

    best = {m: replace(tpl, params=snaps[0]) for m, (tpl, snaps) in banks.items()}

    # rate trajectory over one fresh expert episode
    room = envsim.SEEN_ROOMS[0]
    config = envsim.WorldConfig.for_room(room)
    ep_rng = named_stream(seed, "analyze-episode")
    states, _ = envsim.run_expert_episode(config, ep_rng)
    obs_streams = {
        m: [
            envsim.render(s, m, DomainStyle.SIM_STYLE, ep_rng, config).grid
            for s in states[:-1]
        ]
        for m in best
    }
    phases = [envsim.phase_of(s, config) for s in states[:-1]]
    traj = analysis.rate_trajectory(best, obs_streams, phases, named_stream(seed, "analyze-rate"))
    with open(out_dir / "rate_trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        mods = list(best)
        header = ["t"]
        for m in mods:
            header += [f"rate_{m.value}_mean", f"rate_{m.value}_std"]
        writer.writerow(header + ["phase"])
        for i, t in enumerate(traj.steps):
            row = [t]
            for m in mods:
                row += [traj.means[m][i], traj.stds[m][i]]
            writer.writerow(row + [traj.phases[i].name])

    # knn retrieval table
    first = next(iter(best.values()))
    anchor_rng = named_stream(seed, "analyze-anchors")
    anchor_ids = anchor_rng.choice(len(dataset), size=min(cfg["knn_anchors"], len(dataset)),
                                   replace=False)
    posteriors = analysis.encode_dataset(first, dataset)
    with open(out_dir / "knn.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor", "neighbor", "kl_nats", "domain", "phase"])
        for a in anchor_ids:
            res = analysis.knn_by_kl(
                first, dataset.records[a].obs[first.modality].grid, dataset,
                cfg["knn_k"], posteriors=posteriors,
            )
            for idx, kl, domain, phase in res.neighbors:
                writer.writerow([a, idx, kl, domain.value, phase.name])

    # cross-domain retrieval + OOD AUROC
    sub_rng = named_stream(seed, "analyze-subset")
    sub_ids = sub_rng.choice(len(dataset), size=min(cfg["cross_domain_frames"], len(dataset)),
                             replace=False)
    subset = envsim.DemoDataset([dataset.records[i] for i in sub_ids])
    cross = analysis.cross_domain_score(first, subset, cfg["cross_domain_k"])

    kind, severity = _parse_corruption(cfg["corruption"])
    ood_rng = named_stream(seed, "analyze-ood")
    pair_ids = ood_rng.choice(len(dataset), size=min(cfg["auroc_pairs"], len(dataset)),
                              replace=False)
    rates_clean, rates_corrupt = [], []
    for i in pair_ids:
        obs = dataset.records[i].obs[first.modality]
        rates_clean.append(policy_mod.instance_rate(first, obs.grid, ood_rng))
        corrupted = envsim.corrupt(obs, kind, severity, ood_rng)
        rates_corrupt.append(policy_mod.instance_rate(first, corrupted.grid, ood_rng))
    auroc = analysis.ood_auroc(rates_clean, rates_corrupt)

    # modality ablation table
    rows = []
    if len(best) > 1:
        multi = policy_mod.MultiModalPolicy(
            policies=list(best.values()), fusion_mode=FusionMode.RATE_SOFTMAX
        )
        rows = analysis.ablation_report(
            multi, envsim.SEEN_ROOMS, envsim.UNSEEN_ROOMS, cfg["ablation_trials"],
            named_stream(seed, "analyze-ablation"),
        )
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "total", "total_std", "seen", "seen_std",
                             "unseen", "unseen_std"])
            for r in rows:
                writer.writerow([r.label, *r.total, *r.seen, *r.unseen])

    summary = {
        "cross_domain_score": cross,
        "ood_auroc": auroc,
        "corruption": cfg["corruption"],
        "n_knn_anchors": int(len(anchor_ids)),
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"cross-domain score {cross:.3f}, OOD AUROC {auroc:.3f}")
    return 0


def cmd_sweep_beta(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    _persist_config(cfg, out_dir)
    if not Path(cfg["dataset"]).exists():
        print(f"error: dataset {cfg['dataset']} does not exist", file=sys.stderr)
        return 1
    dataset = io_formats.read_dataset(cfg["dataset"])
    if not cfg["betas"]:
        raise ConfigError("betas list is empty")
    if cfg["modality"] == "both":
        raise ConfigError("sweep-beta needs a single modality")
    (modality,) = _MODALITY_FLAG[cfg["modality"]]
    rows = []
    for beta in cfg["betas"]:
        pol = policy_mod.make_policy(
            modality,
            seed=cfg["seed"],
            latent_dim=cfg["latent_dim"],
            prior_components=cfg["prior_components"],
            mc_samples=cfg["mc_samples"],
            beta_target=beta,
            anneal_steps=cfg["anneal_steps"],
        )
        tc = TrainConfig(
            total_steps=cfg["total_steps"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
            learning_rate=cfg["learning_rate"],
            eval_every=cfg["eval_every"],
            eval_episodes=cfg["eval_episodes"],
        )
        result = policy_mod.train(pol, dataset, tc)
        kept = policy_mod.select_checkpoints(result.checkpoints)
        best = kept[0].sim_success if kept else float("nan")
        final_rate = result.log[-1]["rate"]
        rows.append((beta, best, final_rate))
        print(f"beta {beta:g}: best sim success {best:.2f}, final rate {final_rate:.3f}")
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta_target", "best_sim_success", "final_rate_nats"])
        writer.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibfuse",
        description="VIB behavior cloning with rate-based sensor fusion on LatchWorld",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run the scripted expert and write a dataset")
    _add_common(p)
    p.add_argument("--episodes-per-domain", type=int, dest="episodes_per_domain")

    p = sub.add_parser("train", help="train per-modality policies (or the CF baseline)")
    _add_common(p)
    p.add_argument("--modality", choices=sorted(_MODALITY_FLAG))
    p.add_argument("--fusion", choices=["single", "cf"])
    p.add_argument("--dataset")

    p = sub.add_parser("eval", help="success-rate evaluation of trained checkpoints")
    _add_common(p)
    p.add_argument("--modality", choices=sorted(_MODALITY_FLAG))
    p.add_argument("--fusion", choices=sorted(_FUSION_FLAG))
    p.add_argument("--corruption", help="kind:severity applied to the rgb stream")
    p.add_argument("--checkpoints")

    p = sub.add_parser("analyze", help="rates, retrieval, AUROC, and ablation outputs")
    _add_common(p)
    p.add_argument("--modality", choices=sorted(_MODALITY_FLAG))
    p.add_argument("--corruption", help="kind:severity for the OOD contrast")
    p.add_argument("--checkpoints")
    p.add_argument("--dataset")

    p = sub.add_parser("sweep-beta", help="train once per beta_target and compare")
    _add_common(p)
    p.add_argument("--modality", choices=["rgb", "depth"])
    p.add_argument("--dataset")

    return parser


_COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep-beta": cmd_sweep_beta,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        k: v for k, v in vars(args).items() if k not in ("command", "config")
    }
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except VibfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
