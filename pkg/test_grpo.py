"""
Tests for group-relative advantages, the clipped surrogate and the policy
tuning loop
"""

import numpy as np
import pytest

from backend.checkpoints import read_jsonl
from backend.encoders import ClassifierHyper, DualHyper, LatentScaler, fit_ref_stats, init_classifier, init_dual
from backend.errors import ConfigError, DataError
from backend.flowmatch import FlowConfig, init_velocity_net, sample_sde, step_logprobs
from backend.grpo import (
    CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    GroupRollout,
    GrpoConfig,
    advantages,
    grpo_loss,
    train_grpo,
)
from backend.rlrewards import RewardBreakdown, RewardConfig, RewardModel
from backend.synthworld import GrammarConfig, LatentConfig, Vocabulary, generate_records, latent_matrix
from backend.tensorkit import RngStream, gauss, max_relative_error, numeric_grad


def _random_net(seed=0):
    net = init_velocity_net(4, 3, RngStream(seed, "net"), hidden=(8, 6))
    rng = RngStream(seed, "bias")
    return net.with_params(
        net.params.with_tensors(
            [t if i % 2 == 0 else 0.1 * gauss(rng, t.shape) for i, t in enumerate(net.params.tensors())]
        )
    )


def _perturbed(net, scale, seed):
    rng = RngStream(seed, "perturb")
    return net.with_params(net.params.with_tensors([t + scale * gauss(rng, t.shape) for t in net.params.tensors()]))


def _rollouts(sampler, group_rewards, flow_cfg, seed=0):
    rollouts = []
    for i, rewards in enumerate(group_rewards):
        cond = gauss(RngStream(seed, f"cond{i}"), 3)
        trajs = [sample_sde(sampler, cond, flow_cfg, RngStream(seed, f"g{i}/t{g}")) for g in range(len(rewards))]
        rollouts.append(
            GroupRollout(
                prompt_id=f"p{i}",
                cond=cond,
                trajectories=trajs,
                rewards=[RewardBreakdown(f"p{i}/{g}", total=r) for g, r in enumerate(rewards)],
                advantages=advantages(rewards),
                old_logprobs=np.stack([step_logprobs(sampler, t) for t in trajs]),
            )
        )
    return rollouts


def test_advantages_of_a_simple_group():
    assert np.allclose(advantages([1.0, 2.0, 3.0]), [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_advantages_are_affine_invariant_and_centered():
    r = gauss(RngStream(1, "r"), 8)
    a = advantages(r)
    assert abs(a.sum()) < 1e-12
    assert np.max(np.abs(advantages(3.0 * r + 7.0) - a)) < 1e-7


def test_constant_rewards_give_zero_advantage():
    assert np.all(advantages([0.4, 0.4, 0.4, 0.4]) == 0.0)
    with pytest.raises(ConfigError):
        advantages([1.0])


def test_grpo_config_validation():
    with pytest.raises(ConfigError):
        GrpoConfig(group_size=1)
    with pytest.raises(ConfigError):
        GrpoConfig(clip_eps=1.5)
    with pytest.raises(ConfigError):
        GrpoConfig(beta=-0.1)


def test_rollout_lengths_must_agree():
    net = _random_net()
    traj = sample_sde(net, np.zeros(3), FlowConfig(steps=3), RngStream(0, "s"))
    with pytest.raises(DataError):
        GroupRollout("p", np.zeros(3), [traj, traj], [RewardBreakdown("a", total=0.0)], np.zeros(2), np.zeros((2, 3)))


def test_loss_at_the_sampling_policy():
    net = _random_net(seed=2)
    rollouts = _rollouts(net, [[1.0, 0.0, 2.0, 0.5], [0.3, 0.1, 0.2, 0.9]], FlowConfig(steps=5, sigma=0.5))
    loss, _, stats = grpo_loss(net, net, rollouts, GrpoConfig(beta=1.0))
    assert abs(stats.mean_ratio - 1.0) < 1e-9
    assert abs(stats.surrogate) < 1e-9
    assert stats.kl == 0.0
    assert stats.clip_fraction == 0.0
    assert abs(loss) < 1e-9


def test_constant_rewards_leave_no_gradient():
    net = _random_net(seed=3)
    rollouts = _rollouts(net, [[0.5, 0.5, 0.5]], FlowConfig(steps=4, sigma=0.5))
    _, grads, _ = grpo_loss(net, net, rollouts, GrpoConfig(beta=0.5))
    assert grads.norm() == 0.0


def test_reference_kl_of_a_shifted_velocity():
    reference = _random_net(seed=4)
    shift = 0.3
    tensors = reference.params.tensors()
    tensors[-1] = tensors[-1].copy()
    tensors[-1][0] += shift
    policy = reference.with_params(reference.params.with_tensors(tensors))
    flow_cfg = FlowConfig(steps=5, sigma=0.5)
    rollouts = _rollouts(reference, [[1.0, 2.0, 3.0]], flow_cfg)
    _, _, stats = grpo_loss(policy, reference, rollouts, GrpoConfig(beta=1.0))
    # mean shift dt * shift against step variance sigma^2 dt
    expected = (flow_cfg.dt * shift) ** 2 / (2.0 * flow_cfg.sigma**2 * flow_cfg.dt)
    assert abs(stats.kl - expected) < 1e-12


def test_grpo_loss_gradient():
    reference = _random_net(seed=5)
    policy = _perturbed(reference, 0.02, seed=5)
    rollouts = _rollouts(reference, [[0.2, -1.0, 0.7, 1.5], [2.0, 0.0, 1.0, -0.5]], FlowConfig(steps=4, sigma=1.0))
    cfg = GrpoConfig(clip_eps=0.9, beta=0.5)
    _, grads, stats = grpo_loss(policy, reference, rollouts, cfg)
    assert stats.clip_fraction == 0.0
    numeric = numeric_grad(lambda p: grpo_loss(policy.with_params(p), reference, rollouts, cfg)[0], policy.params)
    assert max_relative_error(grads, numeric) < 1e-4


def test_distant_policy_gets_clipped():
    reference = _random_net(seed=6)
    policy = _perturbed(reference, 0.3, seed=6)
    rollouts = _rollouts(reference, [[0.0, 1.0, 2.0, 3.0]], FlowConfig(steps=3, sigma=0.5))
    _, _, stats = grpo_loss(policy, reference, rollouts, GrpoConfig(clip_eps=0.1, beta=0.0))
    assert stats.clip_fraction > 0.0


@pytest.fixture(scope="module")
def reward_world():
    vocab = Vocabulary.load()
    records = generate_records(400, 13, GrammarConfig(), LatentConfig(), vocab)
    scaler = LatentScaler.fit(latent_matrix(records))
    classifier = init_classifier(64, ClassifierHyper(hidden=(8, 3)), RngStream(13, "clf"), scaler)
    dual = init_dual(vocab.size, 64, DualHyper(embed_dim=6, text_hidden=8, audio_hidden=8), RngStream(13, "dual"), scaler)
    ref_stats = fit_ref_stats(records, classifier)
    policy = init_velocity_net(64, dual.embed_dim, RngStream(13, "policy"), hidden=(16,), scaler=scaler)
    return records, dual, classifier, ref_stats, policy


class FailingRewards:
    """Scores normally until ``limit`` groups, then raises."""

    def __init__(self, inner, limit):
        self.inner = inner
        self.limit = limit
        self.calls = 0

    @property
    def cfg(self):
        return self.inner.cfg

    def score_group(self, *args):
        self.calls += 1
        if self.calls > self.limit:
            raise RuntimeError("reward service went away")
        return self.inner.score_group(*args)


def test_train_grpo_checks_its_inputs(reward_world):
    records, dual, _, _, policy = reward_world
    with pytest.raises(DataError):
        train_grpo(policy, policy, records[:2], dual, None, FlowConfig(), GrpoConfig(prompts_per_iter=4), seed=0)
    other = _perturbed(policy, 0.01, seed=1)
    with pytest.raises(ConfigError):
        train_grpo(other, policy, records[:8], dual, None, FlowConfig(), GrpoConfig(), seed=0)


def test_resume_continues_the_same_run(tmp_path, reward_world):
    records, dual, classifier, ref_stats, policy = reward_world
    model = RewardModel(dual, classifier, ref_stats, RewardConfig())
    flow_cfg = FlowConfig(steps=5, sigma=0.5)
    cfg = GrpoConfig(
        group_size=4, prompts_per_iter=2, iterations=3, checkpoint_every=1, eval_every=0, prompt_source="original"
    )
    prompts = records[:10]

    straight = train_grpo(policy, policy, prompts, dual, model, flow_cfg, cfg, seed=3, out_dir=tmp_path / "a", config_digest="c")
    assert len(read_jsonl(tmp_path / "a" / TRAIN_LOG_NAME)) == 3

    out = tmp_path / "b"
    with pytest.raises(RuntimeError):
        train_grpo(policy, policy, prompts, dual, FailingRewards(model, 4), flow_cfg, cfg, seed=3, out_dir=out, config_digest="c")
    assert (out / f"{CHECKPOINT_NAME}.json").exists()

    with pytest.raises(ConfigError):
        train_grpo(policy, policy, prompts, dual, model, flow_cfg, cfg, seed=3, out_dir=out, resume=True, config_digest="d")

    resumed = train_grpo(policy, policy, prompts, dual, model, flow_cfg, cfg, seed=3, out_dir=out, resume=True, config_digest="c")
    assert [e["iteration"] for e in resumed.log.entries] == [3]
    assert resumed.policy.digest() == straight.policy.digest()
    assert resumed.reference_digest == policy.digest()


@pytest.mark.slow
def test_large_beta_stays_near_the_reference(reward_world):
    records, dual, classifier, ref_stats, policy = reward_world
    model = RewardModel(dual, classifier, ref_stats, RewardConfig.variant("clap"))
    flow_cfg = FlowConfig(steps=8, sigma=0.5)
    drift, kl = {}, {}
    for beta in (0.0, 1e3):
        cfg = GrpoConfig(group_size=6, prompts_per_iter=3, iterations=50, beta=beta, eval_every=0, prompt_source="original")
        result = train_grpo(policy, policy, records[:20], dual, model, flow_cfg, cfg, seed=5)
        drift[beta] = result.policy.params.add(policy.params, -1.0).norm() / policy.params.norm()
        kl[beta] = result.log.entries[-1]["kl_ref"]
    assert drift[1e3] < 0.01
    assert drift[1e3] < drift[0.0]
    assert kl[1e3] < kl[0.0]


@pytest.mark.slow
def test_alignment_reward_raises_held_out_clap(reward_world):
    records, dual, classifier, ref_stats, policy = reward_world
    model = RewardModel(dual, classifier, ref_stats, RewardConfig.variant("clap"))
    cfg = GrpoConfig(
        group_size=8,
        prompts_per_iter=4,
        iterations=40,
        beta=0.0,
        lr_max=3e-3,
        eval_every=40,
        prompt_source="original",
    )
    prompts = records[:32]
    result = train_grpo(
        policy, policy, prompts, dual, model, FlowConfig(steps=10, sigma=0.5), cfg, seed=7, eval_prompts=prompts[:16]
    )
    assert set(result.probes) == {0, 40}
    assert result.probes[40] > result.probes[0]
