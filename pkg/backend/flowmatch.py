"""
Conditional rectified flow: velocity regression, Euler ODE sampling and the
stochastic SDE sampler whose Gaussian steps define the policy likelihood
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from backend.captionaug import MixPolicy, mix_sample
from backend.checkpoints import load_checkpoint, save_checkpoint
from backend.encoders import DualEncoder, LatentScaler, TrainingLog, embed_texts, split_holdout
from backend.errors import ConfigError, NumericError, ShapeError, TrainingError, UndefinedDensityError
from backend.synthworld import DatasetRecord, latent_matrix
from backend.tensorkit import (
    MlpParams,
    RngStream,
    adamw_init,
    adamw_step,
    as_batch,
    clip_grad_norm,
    cosine_lr,
    gauss,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    steps: int = 20
    sigma: float = 0.25

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampling steps must be at least 1, got {self.steps}")
        if not self.sigma >= 0:
            raise ConfigError(f"noise scale must be non-negative, got {self.sigma}")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def step_std(self) -> float:
        return self.sigma * math.sqrt(self.dt)


@dataclass
class PretrainHyper:
    hidden: Tuple[int, ...] = (128, 128)
    epochs: int = 30
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 5e-6
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    holdout_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain epochs and batch size must be positive")


@dataclass
class VelocityNet:
    """Velocity field over standardized latents, conditioned on a text embedding"""

    params: MlpParams
    latent_dim: int
    cond_dim: int
    scaler: LatentScaler

    def __post_init__(self):
        if self.params.dims[0] != self.latent_dim + 1 + self.cond_dim or self.params.dims[-1] != self.latent_dim:
            raise ShapeError(
                f"velocity net dims {self.params.dims} do not fit latent {self.latent_dim} + cond {self.cond_dim}"
            )

    def with_params(self, params: MlpParams) -> "VelocityNet":
        return VelocityNet(params=params, latent_dim=self.latent_dim, cond_dim=self.cond_dim, scaler=self.scaler)

    def digest(self) -> str:
        return hashlib.sha256(self.params.digest().encode("ascii")).hexdigest()


@dataclass
class Trajectory:
    cond_id: str
    cond: np.ndarray
    states: np.ndarray  # (steps + 1, D)
    noises: np.ndarray  # (steps, D)
    dt: float
    sigma: float

    @property
    def steps(self) -> int:
        return self.noises.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_dict(self) -> dict:
        return {
            "cond_id": self.cond_id,
            "cond": self.cond.tolist(),
            "states": self.states.tolist(),
            "noises": self.noises.tolist(),
            "dt": self.dt,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        return cls(
            cond_id=data["cond_id"],
            cond=np.asarray(data["cond"], dtype=np.float64),
            states=np.asarray(data["states"], dtype=np.float64),
            noises=np.asarray(data["noises"], dtype=np.float64),
            dt=float(data["dt"]),
            sigma=float(data["sigma"]),
        )


def init_velocity_net(
    latent_dim: int, cond_dim: int, rng: RngStream, hidden: Sequence[int] = (128, 128), scaler: Optional[LatentScaler] = None
) -> VelocityNet:
    params = init_mlp((latent_dim + 1 + cond_dim,) + tuple(hidden) + (latent_dim,), rng)
    return VelocityNet(params=params, latent_dim=latent_dim, cond_dim=cond_dim, scaler=scaler or LatentScaler.identity(latent_dim))


def net_input(x: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    """Rows of concat(x_t, t, cond); ``t`` and ``cond`` broadcast over the batch."""
    x = as_batch(x)
    batch = x.shape[0]
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch, 1))
    c = np.broadcast_to(as_batch(cond), (batch, np.shape(cond)[-1]))
    return np.concatenate([x, t_col, c], axis=1)


def velocity(net: VelocityNet, x: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    v, _ = mlp_forward(net.params, net_input(x, t, cond))
    return v


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1) if np.ndim(t) else float(t)
    return (1.0 - t) * x0 + t * x1


def fm_loss_at(
    params: MlpParams, x1: np.ndarray, cond: np.ndarray, x0: np.ndarray, t
) -> Tuple[float, MlpParams]:
    """Velocity regression loss mean ||v(x_t, t, c) - (x1 - x0)||^2 / D at fixed noise and times."""
    x1, x0 = as_batch(x1), as_batch(x0)
    if x1.shape != x0.shape:
        raise ShapeError(f"x1 {x1.shape} and x0 {x0.shape} differ")
    batch, dim = x1.shape
    target = x1 - x0
    v, cache = mlp_forward(params, net_input(interpolate(x0, x1, t), t, cond))
    diff = v - target
    loss = float(np.sum(diff * diff)) / (batch * dim)
    if not math.isfinite(loss):
        raise NumericError("non-finite flow-matching loss")
    grads, _ = mlp_backward(params, cache, 2.0 * diff / (batch * dim))
    return loss, grads


def fm_loss(params: MlpParams, x1: np.ndarray, cond: np.ndarray, rng: RngStream) -> Tuple[float, MlpParams]:
    """fm_loss_at with t ~ U(0, 1) per row and x0 ~ N(0, I)."""
    x1 = as_batch(x1)
    t = rng.random(x1.shape[0])
    x0 = gauss(rng, x1.shape)
    return fm_loss_at(params, x1, cond, x0, t)


def fit_velocity(
    net: VelocityNet,
    x1: np.ndarray,
    cond_sampler: Callable[[int], np.ndarray],
    hyper: PretrainHyper,
    rng: RngStream,
    held_x1: Optional[np.ndarray] = None,
    held_cond: Optional[np.ndarray] = None,
) -> Tuple[VelocityNet, TrainingLog]:
    """Minibatch AdamW on the flow-matching loss; ``cond_sampler(epoch)`` gives one condition row per sample."""
    hyper.validate()
    x1 = as_batch(x1)
    n = x1.shape[0]
    params = net.params
    opt = adamw_init(params, weight_decay=hyper.weight_decay)
    batches = max(1, math.ceil(n / hyper.batch_size))
    total = hyper.epochs * batches
    log = TrainingLog()
    held_probe = None
    if held_x1 is not None:
        probe_rng = rng.spawn("held-probe")
        held_t = probe_rng.random(held_x1.shape[0])
        held_x0 = gauss(probe_rng, held_x1.shape)

        def held_probe(p: MlpParams) -> float:
            return fm_loss_at(p, held_x1, held_cond, held_x0, held_t)[0]

        log.add(stage="pretrain", epoch=-1, held_out_loss=held_probe(params))
    batch_rng = rng.spawn("batches")
    noise_rng = rng.spawn("noise")
    step = 0
    for epoch in range(hyper.epochs):
        conds = as_batch(cond_sampler(epoch))
        order = batch_rng.permutation(n)
        epoch_loss = 0.0
        for b in range(batches):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            loss, grads = fm_loss(params, x1[idx], conds[idx], noise_rng)
            if not math.isfinite(loss) or not grads.is_finite():
                raise TrainingError(f"flow-matching loss diverged at step {step}")
            grads, _ = clip_grad_norm(grads, hyper.grad_clip)
            params, opt = adamw_step(opt, params, grads, cosine_lr(step, total, hyper.lr_max, hyper.lr_min))
            epoch_loss += loss
            step += 1
        entry = {"stage": "pretrain", "epoch": epoch, "train_loss": epoch_loss / batches}
        if held_probe is not None:
            entry["held_out_loss"] = held_probe(params)
        log.add(**entry)
    return net.with_params(params), log


def pretrain(
    net: VelocityNet,
    records: Sequence[DatasetRecord],
    dual: DualEncoder,
    policy: MixPolicy,
    hyper: PretrainHyper,
    seed: int,
    checkpoint_path: Optional[os.PathLike] = None,
    prompt_source: str = "enriched",
) -> Tuple[VelocityNet, TrainingLog]:
    """Supervised flow-matching stage on original/enriched caption mixes."""
    rng = RngStream(seed, "pretrain")
    x_all = net.scaler.transform(latent_matrix(records))
    original = embed_texts(dual, [r.original for r in records])
    has_enriched = all(r.enriched is not None for r in records)
    enriched = embed_texts(dual, [r.enriched for r in records]) if has_enriched else None
    if policy.ratio > 0 and not has_enriched:
        missing = next(r.record_id for r in records if r.enriched is None)
        raise TrainingError(f"mixing ratio {policy.ratio} needs enriched captions; {missing} has none")
    train_idx, held_idx = split_holdout(len(records), hyper.holdout_fraction, rng.spawn("split"))
    mix_rng = rng.spawn("mix")

    def cond_sampler(epoch: int) -> np.ndarray:
        rows = []
        for i in train_idx:
            pick = mix_sample(mix_rng, records[i].original, records[i].enriched, policy)
            rows.append(enriched[i] if pick.source == "enriched" else original[i])
        return np.stack(rows)

    held_cond = enriched[held_idx] if (prompt_source == "enriched" and enriched is not None) else original[held_idx]
    net, log = fit_velocity(net, x_all[train_idx], cond_sampler, hyper, rng, x_all[held_idx], held_cond)
    initial, final = log.entries[0]["held_out_loss"], log.last["held_out_loss"]
    if final >= initial:
        logger.warning(f"Pretrain held-out loss {final:.4f} did not improve on {initial:.4f}")
    logger.info(f"Pretrained flow (rho={policy.ratio}): held-out loss {initial:.4f} -> {final:.4f}")
    if checkpoint_path:
        save_velocity_net(checkpoint_path, net, hyper=asdict(hyper), extra={"rho": policy.ratio})
    return net, log


def _check_cond(net: VelocityNet, cond: np.ndarray) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64).ravel()
    if cond.shape[0] != net.cond_dim:
        raise ShapeError(f"condition width {cond.shape[0]} != {net.cond_dim}")
    return cond


def sample_ode(net: VelocityNet, cond: np.ndarray, config: FlowConfig, rng: RngStream) -> np.ndarray:
    """Euler integration from x_0 ~ N(0, I); returns x_N in model space."""
    cond = _check_cond(net, cond)
    dt = config.dt
    x = gauss(rng, net.latent_dim)
    for k in range(config.steps):
        x = x + dt * velocity(net, x, k * dt, cond)[0]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state at step {k}", index=k)
    return x


def sample_sde(
    net: VelocityNet, cond: np.ndarray, config: FlowConfig, rng: RngStream, cond_id: str = ""
) -> Trajectory:
    """Euler-Maruyama rollout x_{k+1} = x_k + dt v + sigma sqrt(dt) xi_k, recording every state and noise."""
    cond = _check_cond(net, cond)
    dt, std = config.dt, config.step_std
    x = gauss(rng, net.latent_dim)
    states = [x]
    noises = []
    for k in range(config.steps):
        mean = x + dt * velocity(net, x, k * dt, cond)[0]
        if config.sigma > 0:
            xi = gauss(rng, net.latent_dim)
            x = mean + std * xi
        else:
            xi = np.zeros(net.latent_dim)
            x = mean
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state at step {k}", index=k)
        states.append(x)
        noises.append(xi)
    return Trajectory(
        cond_id=cond_id, cond=cond, states=np.stack(states), noises=np.stack(noises), dt=dt, sigma=config.sigma
    )


def step_means(net: VelocityNet, traj: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step transition means under ``net`` and the velocities behind them."""
    times = np.arange(traj.steps) * traj.dt
    v = velocity(net, traj.states[:-1], times, traj.cond)
    return traj.states[:-1] + traj.dt * v, v


def step_logprobs(net: VelocityNet, traj: Trajectory) -> np.ndarray:
    """log N(x_{k+1}; mu_k, sigma^2 dt I) for every step, with mu_k recomputed under ``net``."""
    if traj.sigma <= 0:
        raise UndefinedDensityError("trajectory density is undefined for a deterministic sampler (sigma = 0)")
    var = traj.sigma * traj.sigma * traj.dt
    means, _ = step_means(net, traj)
    resid = traj.states[1:] - means
    dim = resid.shape[1]
    return -0.5 * dim * (LOG_2PI + math.log(var)) - np.sum(resid * resid, axis=1) / (2.0 * var)


def traj_logprob(net: VelocityNet, traj: Trajectory) -> float:
    return float(np.sum(step_logprobs(net, traj)))


def save_velocity_net(path: os.PathLike, net: VelocityNet, hyper: Optional[dict] = None, extra: Optional[dict] = None):
    tensors = net.params.named_tensors("velocity.")
    tensors.update(net.scaler.named_tensors())
    extra = dict(extra or {})
    extra.update(latent_dim=net.latent_dim, cond_dim=net.cond_dim)
    return save_checkpoint(path, "velocity", tensors, hyper or {}, extra)


def load_velocity_net(path: os.PathLike) -> VelocityNet:
    ckpt = load_checkpoint(path, "velocity")
    return VelocityNet(
        params=MlpParams.from_named(ckpt.tensors, "velocity."),
        latent_dim=int(ckpt.extra["latent_dim"]),
        cond_dim=int(ckpt.extra["cond_dim"]),
        scaler=LatentScaler.from_named(ckpt.tensors),
    )


def dump_trajectories(path: os.PathLike, trajectories: Sequence[Trajectory]) -> Path:
    """Debug dump, one JSON trajectory per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_dict()) + "\n")
    return path


def load_trajectories(path: os.PathLike) -> List[Trajectory]:
    with open(path, "r", encoding="utf-8") as f:
        return [Trajectory.from_dict(json.loads(line)) for line in f if line.strip()]
