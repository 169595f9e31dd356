"""
Group relative policy optimization of the flow policy: group rollouts,
standardized advantages, the per-step clipped surrogate with a closed-form
reference KL, and the training loop with checkpoints and resume
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.checkpoints import load_checkpoint, save_checkpoint, write_jsonl
from backend.encoders import DualEncoder, TrainingLog, embed_texts
from backend.errors import ConfigError, DataError, NumericError, TrainingError
from backend.flowmatch import FlowConfig, Trajectory, VelocityNet, net_input, sample_ode, sample_sde, step_logprobs
from backend.rlrewards import RewardBreakdown, RewardModel, clap_rewards, write_reward_log
from backend.synthworld import DatasetRecord
from backend.tensorkit import (
    AdamWState,
    MlpParams,
    RngStream,
    adamw_init,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    mlp_backward,
    mlp_forward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "policy"
TRAIN_LOG_NAME = "train_log.jsonl"
REWARD_LOG_NAME = "rewards.jsonl"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.01
    inner_epochs: int = 1
    prompts_per_iter: int = 4
    iterations: int = 40
    adv_eps: float = 1e-8
    lr_max: float = 3e-4
    lr_min: float = 5e-6
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    max_grad_norm: float = 1e6
    checkpoint_every: int = 10
    eval_every: int = 10
    eval_prompts: int = 32
    prompt_source: str = "enriched"
    workers: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError(f"group size must be at least 2, got {self.group_size}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip epsilon must lie in (0, 1), got {self.clip_eps}")
        if self.beta < 0:
            raise ConfigError(f"reference KL coefficient must be non-negative, got {self.beta}")
        if self.inner_epochs < 1 or self.prompts_per_iter < 1 or self.iterations < 1:
            raise ConfigError("inner epochs, prompts per iteration and iterations must be positive")


@dataclass
class GroupRollout:
    prompt_id: str
    cond: np.ndarray
    trajectories: List[Trajectory]
    rewards: List[RewardBreakdown]
    advantages: np.ndarray
    old_logprobs: np.ndarray  # (G, steps)

    def __post_init__(self):
        sizes = {len(self.trajectories), len(self.rewards), len(self.advantages), len(self.old_logprobs)}
        if len(sizes) != 1:
            raise DataError(f"rollout {self.prompt_id}: trajectories, rewards and advantages differ in length")

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass
class GrpoLossStats:
    loss: float
    surrogate: float
    kl: float
    mean_ratio: float
    clip_fraction: float


def advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"advantages need a group of at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    return centered / (np.sqrt(np.mean(centered * centered)) + eps)


def rollout_group(
    policy: VelocityNet,
    prompt: DatasetRecord,
    cond: np.ndarray,
    group_size: int,
    flow_cfg: FlowConfig,
    reward_model: RewardModel,
    rng: RngStream,
    prompt_source: str = "enriched",
    adv_eps: float = 1e-8,
    workers: int = 1,
) -> GroupRollout:
    """Sample a group of SDE trajectories for one prompt and score them."""
    if flow_cfg.sigma <= 0:
        raise ConfigError("policy rollouts need a positive noise scale")

    def one(g: int) -> Trajectory:
        return sample_sde(policy, cond, flow_cfg, rng.spawn(f"traj{g}"), cond_id=prompt.record_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(one, range(group_size)))
    else:
        trajectories = [one(g) for g in range(group_size)]
    finals = policy.scaler.inverse(np.stack([t.final for t in trajectories]))
    sample_ids = [f"{prompt.record_id}/{g}" for g in range(group_size)]
    rewards = reward_model.score_group(
        prompt.caption(prompt_source), prompt.scene, prompt.latent.astype(np.float64).ravel(), finals, sample_ids
    )
    totals = np.array([b.total for b in rewards])
    return GroupRollout(
        prompt_id=prompt.record_id,
        cond=np.asarray(cond, dtype=np.float64).ravel(),
        trajectories=trajectories,
        rewards=rewards,
        advantages=advantages(totals, adv_eps),
        old_logprobs=np.stack([step_logprobs(policy, t) for t in trajectories]),
    )


def _stack_steps(rollouts: Sequence[GroupRollout]):
    inputs, nexts, currents, old, adv, step_index = [], [], [], [], [], []
    sigma = dt = None
    for rollout in rollouts:
        for traj, lp, a in zip(rollout.trajectories, rollout.old_logprobs, rollout.advantages):
            if sigma is None:
                sigma, dt = traj.sigma, traj.dt
            elif traj.sigma != sigma or traj.dt != dt:
                raise ConfigError("all trajectories in one update must share step size and noise scale")
            times = np.arange(traj.steps) * traj.dt
            inputs.append(net_input(traj.states[:-1], times, traj.cond))
            currents.append(traj.states[:-1])
            nexts.append(traj.states[1:])
            old.append(np.asarray(lp))
            adv.append(np.full(traj.steps, a))
            step_index.append(np.arange(traj.steps))
    if not inputs:
        raise DataError("no trajectories to train on")
    return (
        np.concatenate(inputs),
        np.concatenate(currents),
        np.concatenate(nexts),
        np.concatenate(old),
        np.concatenate(adv),
        np.concatenate(step_index),
        sigma,
        dt,
    )


def grpo_loss(
    policy: VelocityNet, reference: VelocityNet, rollouts: Sequence[GroupRollout], cfg: GrpoConfig
) -> Tuple[float, MlpParams, GrpoLossStats]:
    """Per-step clipped surrogate plus beta times the closed-form Gaussian KL to the reference.

    Averaged over every (sample, step) pair of every rollout.
    """
    inputs, current, nxt, old, adv, step_index, sigma, dt = _stack_steps(rollouts)
    if sigma <= 0:
        raise ConfigError("clipped ratios need a positive noise scale")
    var = sigma * sigma * dt
    rows, dim = current.shape

    v_pol, cache = mlp_forward(policy.params, inputs)
    v_ref, _ = mlp_forward(reference.params, inputs)
    resid = nxt - (current + dt * v_pol)
    logp = -0.5 * dim * (LOG_2PI + math.log(var)) - np.sum(resid * resid, axis=1) / (2.0 * var)
    ratio = np.exp(logp - old)
    bad = ~np.isfinite(ratio)
    if np.any(bad):
        k = int(step_index[np.argmax(bad)])
        raise NumericError(f"non-finite probability ratio at step {k}", index=k)

    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    surrogate = np.minimum(unclipped_term, clipped_term)
    active = unclipped_term <= clipped_term
    dv_gap = v_pol - v_ref
    kl = dt * dt * np.sum(dv_gap * dv_gap, axis=1) / (2.0 * var)
    loss = -float(np.mean(surrogate)) + cfg.beta * float(np.mean(kl))

    # d logp / d v = dt * resid / var ; d ratio = ratio * d logp
    d_surr_d_logp = np.where(active, unclipped_term, 0.0)
    dv = -(d_surr_d_logp[:, None] * dt * resid / var) / rows
    dv += cfg.beta * dt * dt * dv_gap / var / rows
    grads, _ = mlp_backward(policy.params, cache, dv)
    stats = GrpoLossStats(
        loss=loss,
        surrogate=float(np.mean(surrogate)),
        kl=float(np.mean(kl)),
        mean_ratio=float(np.mean(ratio)),
        clip_fraction=float(np.mean(np.abs(ratio - clipped) > 0)),
    )
    return loss, grads, stats


def probe_clap(
    policy: VelocityNet,
    prompts: Sequence[DatasetRecord],
    conds: np.ndarray,
    dual: DualEncoder,
    flow_cfg: FlowConfig,
    seed: int,
    prompt_source: str = "enriched",
) -> float:
    """Mean alignment of ODE samples on held-out prompts, with fixed per-prompt noise."""
    scores = []
    for prompt, cond in zip(prompts, conds):
        x = sample_ode(policy, cond, flow_cfg, RngStream(seed, f"probe/{prompt.record_id}"))
        scores.append(clap_rewards(dual, prompt.caption(prompt_source), policy.scaler.inverse(x))[0])
    return float(np.mean(scores)) if scores else float("nan")


def _save_state(
    path: Path, policy: VelocityNet, opt: AdamWState, iteration: int, config_digest: str, reference_digest: str
) -> Path:
    tensors = policy.params.named_tensors("velocity.")
    tensors.update(policy.scaler.named_tensors())
    tensors.update(opt.named_tensors())
    extra = {
        "latent_dim": policy.latent_dim,
        "cond_dim": policy.cond_dim,
        "iteration": iteration,
        "adam_step": opt.step,
        "config_digest": config_digest,
        "reference_digest": reference_digest,
    }
    return save_checkpoint(path, "grpo_state", tensors, {}, extra)


@dataclass
class GrpoResult:
    policy: VelocityNet
    log: TrainingLog
    reference_digest: str
    checkpoint: Optional[str] = None
    probes: Dict[int, float] = field(default_factory=dict)


def train_grpo(
    policy: VelocityNet,
    reference: VelocityNet,
    prompts: Sequence[DatasetRecord],
    dual: DualEncoder,
    reward_model: RewardModel,
    flow_cfg: FlowConfig,
    cfg: GrpoConfig,
    seed: int,
    out_dir: Optional[os.PathLike] = None,
    resume: bool = False,
    config_digest: str = "",
    eval_prompts: Sequence[DatasetRecord] = (),
) -> GrpoResult:
    """Fine-tune ``policy`` against the frozen ``reference`` with group-relative advantages."""
    if len(prompts) < cfg.prompts_per_iter:
        raise DataError(f"need at least {cfg.prompts_per_iter} prompts, got {len(prompts)}")
    out = Path(out_dir) if out_dir else None
    reference_digest = reference.digest()
    opt = adamw_init(policy.params, weight_decay=cfg.weight_decay)
    start = 0
    log = TrainingLog()
    ckpt_path = out / CHECKPOINT_NAME if out else None

    if resume and ckpt_path is not None and ckpt_path.with_suffix(".json").exists():
        state = load_checkpoint(ckpt_path, "grpo_state")
        if state.extra.get("config_digest") != config_digest:
            raise ConfigError(f"cannot resume {ckpt_path}: it was written under a different configuration")
        if state.extra.get("reference_digest") != reference_digest:
            raise ConfigError(f"cannot resume {ckpt_path}: reference model differs")
        policy = policy.with_params(MlpParams.from_named(state.tensors, "velocity."))
        opt = AdamWState(
            m=MlpParams.from_named(state.tensors, "adam.m."),
            v=MlpParams.from_named(state.tensors, "adam.v."),
            step=int(state.extra["adam_step"]),
            weight_decay=cfg.weight_decay,
        )
        start = int(state.extra["iteration"])
        logger.info(f"Resuming GRPO from iteration {start}")
    elif policy.digest() != reference_digest:
        raise ConfigError("policy and reference must start from the same pretrained weights")

    conds = embed_texts(dual, [p.caption(cfg.prompt_source) for p in prompts])
    eval_prompts = list(eval_prompts)[: cfg.eval_prompts]
    eval_conds = embed_texts(dual, [p.caption(cfg.prompt_source) for p in eval_prompts]) if eval_prompts else None
    result = GrpoResult(policy=policy, log=log, reference_digest=reference_digest)

    def probe(iteration: int):
        if eval_conds is None:
            return None
        value = probe_clap(policy, eval_prompts, eval_conds, dual, flow_cfg, seed, cfg.prompt_source)
        result.probes[iteration] = value
        return value

    if start == 0:
        initial = probe(0)
        if initial is not None:
            log.add(stage="grpo", iteration=0, probe_clap=initial)

    last_good = str(ckpt_path) if ckpt_path and ckpt_path.with_suffix(".json").exists() else None
    for it in range(start, cfg.iterations):
        rng = RngStream(seed, f"grpo/iter{it}")
        chosen = rng.choice(len(prompts), size=cfg.prompts_per_iter, replace=False)
        rollouts = [
            rollout_group(
                policy,
                prompts[int(j)],
                conds[int(j)],
                cfg.group_size,
                flow_cfg,
                reward_model,
                rng.spawn(f"prompt{int(j)}"),
                cfg.prompt_source,
                cfg.adv_eps,
                cfg.workers,
            )
            for j in chosen
        ]
        breakdowns = [b for r in rollouts for b in r.rewards]
        mean_reward = float(np.mean([b.total for b in breakdowns]))
        lr = cosine_lr(it, cfg.iterations, cfg.lr_max, cfg.lr_min)
        for _ in range(cfg.inner_epochs):
            loss, grads, stats = grpo_loss(policy, reference, rollouts, cfg)
            grads, grad_norm = clip_grad_norm(grads, cfg.grad_clip)
            if not (math.isfinite(mean_reward) and math.isfinite(loss) and grad_norm <= cfg.max_grad_norm):
                raise TrainingError(
                    f"GRPO diverged at iteration {it} (mean reward {mean_reward}, grad norm {grad_norm:.3g})",
                    checkpoint_path=last_good,
                )
            params, opt = adamw_step(opt, policy.params, grads, lr)
            policy = policy.with_params(params)

        entry = {
            "stage": "grpo",
            "iteration": it + 1,
            "mean_reward": mean_reward,
            "r_clap": float(np.mean([b.r_clap for b in breakdowns])),
            "r_kl": float(np.mean([b.r_kl for b in breakdowns])),
            "r_fad": float(np.mean([b.r_fad for b in breakdowns])),
            "kl_ref": stats.kl,
            "loss": loss,
            "grad_norm": grad_norm,
            "clip_fraction": stats.clip_fraction,
            "lr": lr,
        }
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            entry["probe_clap"] = probe(it + 1)
        log.add(**entry)
        if out:
            write_jsonl(out / TRAIN_LOG_NAME, [entry], append=True)
            for r in rollouts:
                write_reward_log(out / REWARD_LOG_NAME, r.rewards, f"iter{it}/{r.prompt_id}", reward_model.cfg)
            if cfg.checkpoint_every and ((it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations):
                last_good = str(_save_state(ckpt_path, policy, opt, it + 1, config_digest, reference_digest))
        logger.info(
            f"GRPO iteration {it + 1}/{cfg.iterations}: reward {mean_reward:.4f}, "
            f"KL-to-reference {stats.kl:.3g}, grad norm {grad_norm:.3g}"
        )

    if reference.digest() != reference_digest:
        raise TrainingError("reference model changed during training", checkpoint_path=last_good)
    if cfg.eval_every and result.probes and cfg.iterations not in result.probes and start < cfg.iterations:
        log.add(stage="grpo", iteration=cfg.iterations, probe_clap=probe(cfg.iterations))
    result.policy = policy
    result.checkpoint = last_good
    return result
