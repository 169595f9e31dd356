"""
Tests for flow matching, ODE/SDE sampling and trajectory likelihoods
"""

import math

import numpy as np
import pytest

from backend.captionaug import MixPolicy, augment_records, load_rulesets
from backend.encoders import DualHyper, LatentScaler, init_dual
from backend.errors import ConfigError, ShapeError, TrainingError, UndefinedDensityError
from backend.flowmatch import (
    FlowConfig,
    PretrainHyper,
    VelocityNet,
    dump_trajectories,
    fit_velocity,
    fm_loss_at,
    init_velocity_net,
    load_trajectories,
    load_velocity_net,
    pretrain,
    sample_ode,
    sample_sde,
    save_velocity_net,
    step_logprobs,
    traj_logprob,
)
from backend.rewriters import RuleBasedRewriter
from backend.synthworld import GrammarConfig, LatentConfig, Vocabulary, generate_records, latent_matrix
from backend.tensorkit import MlpParams, RngStream, gauss, max_relative_error, numeric_grad


def _linear_net(latent_dim, cond_dim, x_gain=0.0, cond_gain=0.0, bias=None):
    """Single linear layer: v = x_gain * x + cond_gain * cond + bias"""
    w = np.zeros((latent_dim + 1 + cond_dim, latent_dim))
    w[:latent_dim] = x_gain * np.eye(latent_dim)
    if cond_gain:
        w[latent_dim + 1 :] = cond_gain * np.eye(latent_dim)
    b = np.zeros(latent_dim) if bias is None else np.asarray(bias, dtype=np.float64)
    params = MlpParams(weights=[w], biases=[b])
    return VelocityNet(params=params, latent_dim=latent_dim, cond_dim=cond_dim, scaler=LatentScaler.identity(latent_dim))


def _random_net(latent_dim=4, cond_dim=3, seed=0):
    net = init_velocity_net(latent_dim, cond_dim, RngStream(seed, "net"), hidden=(8, 6))
    rng = RngStream(seed, "bias")
    return net.with_params(
        net.params.with_tensors(
            [t if i % 2 == 0 else 0.1 * gauss(rng, t.shape) for i, t in enumerate(net.params.tensors())]
        )
    )


def test_flow_config_validation():
    assert FlowConfig(steps=20).dt == 0.05
    assert abs(FlowConfig(steps=4, sigma=0.5).step_std - 0.25) < 1e-15
    with pytest.raises(ConfigError):
        FlowConfig(steps=0)
    with pytest.raises(ConfigError):
        FlowConfig(sigma=-0.1)


def test_velocity_net_dims_must_fit():
    params = MlpParams(weights=[np.zeros((5, 4))], biases=[np.zeros(4)])
    with pytest.raises(ShapeError):
        VelocityNet(params=params, latent_dim=4, cond_dim=3, scaler=LatentScaler.identity(4))


def test_perfect_velocity_has_zero_loss():
    rng = RngStream(1, "fm")
    x0, x1 = gauss(rng, (6, 4)), gauss(rng, (6, 4))
    net = _linear_net(4, 4, cond_gain=1.0)
    loss, _ = fm_loss_at(net.params, x1, x1 - x0, x0, rng.random(6))
    assert loss < 1e-24


def test_zero_net_on_equal_endpoints_has_zero_loss():
    x = gauss(RngStream(2, "x"), (3, 4))
    net = _linear_net(4, 2)
    loss, grads = fm_loss_at(net.params, x, np.zeros(2), x, 0.5)
    assert loss == 0.0
    assert grads.norm() == 0.0


def test_fm_loss_gradient():
    net = _random_net()
    rng = RngStream(3, "fm")
    x0, x1 = gauss(rng, (5, 4)), gauss(rng, (5, 4))
    cond, t = gauss(rng, (5, 3)), rng.random(5)
    _, grads = fm_loss_at(net.params, x1, cond, x0, t)
    numeric = numeric_grad(lambda p: fm_loss_at(p, x1, cond, x0, t)[0], net.params)
    assert max_relative_error(grads, numeric) < 1e-4


def test_constant_velocity_euler_is_exact():
    bias = np.array([0.5, -1.0, 2.0])
    net = _linear_net(3, 2, bias=bias)
    x = sample_ode(net, np.zeros(2), FlowConfig(steps=10), RngStream(4, "ode"))
    x0 = gauss(RngStream(4, "ode"), 3)
    assert np.max(np.abs(x - (x0 + bias))) < 1e-12


def test_more_steps_track_the_linear_flow():
    net = _linear_net(2, 1, x_gain=0.8)
    x0 = gauss(RngStream(5, "ode"), 2)
    exact = x0 * math.exp(0.8)
    coarse = sample_ode(net, np.zeros(1), FlowConfig(steps=1), RngStream(5, "ode"))
    fine = sample_ode(net, np.zeros(1), FlowConfig(steps=100), RngStream(5, "ode"))
    assert np.linalg.norm(fine - exact) < np.linalg.norm(coarse - exact)
    assert np.linalg.norm(fine - exact) < 0.01 * np.linalg.norm(exact)


def test_sigma_zero_sde_equals_ode():
    net = _random_net()
    cond = gauss(RngStream(6, "c"), 3)
    ode = sample_ode(net, cond, FlowConfig(steps=8, sigma=0.0), RngStream(6, "s"))
    sde = sample_sde(net, cond, FlowConfig(steps=8, sigma=0.0), RngStream(6, "s"))
    assert np.array_equal(ode, sde.final)
    assert np.all(sde.noises == 0)
    with pytest.raises(UndefinedDensityError):
        step_logprobs(net, sde)


def test_sde_is_deterministic_per_stream():
    net = _random_net()
    cond = np.ones(3)
    a = sample_sde(net, cond, FlowConfig(steps=5), RngStream(7, "s"), cond_id="p")
    b = sample_sde(net, cond, FlowConfig(steps=5), RngStream(7, "s"), cond_id="p")
    assert np.array_equal(a.states, b.states)
    assert a.states.shape == (6, 4) and a.noises.shape == (5, 4)


def test_sampling_rejects_wrong_condition_width():
    with pytest.raises(ShapeError):
        sample_ode(_random_net(), np.ones(4), FlowConfig(), RngStream(0, "s"))


def test_traj_logprob_matches_brute_force():
    net = _random_net(seed=8)
    traj = sample_sde(net, gauss(RngStream(8, "c"), 3), FlowConfig(steps=6, sigma=0.3), RngStream(8, "s"))
    var = 0.3 * 0.3 / 6
    total = 0.0
    for k in range(traj.steps):
        x = traj.states[k]
        v = net.params.weights[0].T @ np.concatenate([x, [k / 6], traj.cond]) + net.params.biases[0]
        v = np.tanh(v)
        v = net.params.weights[1].T @ v + net.params.biases[1]
        v = np.tanh(v)
        v = net.params.weights[2].T @ v + net.params.biases[2]
        mean = x + v / 6
        for d in range(4):
            r = traj.states[k + 1][d] - mean[d]
            total += -0.5 * math.log(2 * math.pi * var) - r * r / (2 * var)
    assert abs(traj_logprob(net, traj) - total) < 1e-10


def test_logprob_under_generating_net_uses_recorded_noise():
    net = _random_net(seed=9)
    traj = sample_sde(net, np.zeros(3), FlowConfig(steps=4, sigma=0.5), RngStream(9, "s"))
    var = 0.25 / 4
    expected = -0.5 * 4 * math.log(2 * math.pi * var) - 0.5 * np.sum(traj.noises**2, axis=1)
    assert np.max(np.abs(step_logprobs(net, traj) - expected)) < 1e-10


def test_trajectory_dump_round_trip(tmp_path):
    net = _random_net()
    trajs = [sample_sde(net, np.ones(3), FlowConfig(steps=3), RngStream(i, "s"), cond_id=f"p{i}") for i in range(2)]
    loaded = load_trajectories(dump_trajectories(tmp_path / "debug" / "traj.jsonl", trajs))
    assert [t.cond_id for t in loaded] == ["p0", "p1"]
    assert np.array_equal(loaded[1].states, trajs[1].states)
    assert traj_logprob(net, loaded[0]) == traj_logprob(net, trajs[0])


def test_velocity_net_persists(tmp_path):
    net = _random_net()
    save_velocity_net(tmp_path / "velocity", net, extra={"rho": 0.5})
    loaded = load_velocity_net(tmp_path / "velocity")
    assert loaded.digest() == net.digest()
    assert (loaded.latent_dim, loaded.cond_dim) == (4, 3)


@pytest.fixture(scope="module")
def tiny_world():
    vocab = Vocabulary.load()
    records = generate_records(160, 12, GrammarConfig(), LatentConfig(), vocab)
    scaler = LatentScaler.fit(latent_matrix(records))
    dual = init_dual(vocab.size, 64, DualHyper(embed_dim=6, text_hidden=8, audio_hidden=8), RngStream(12, "dual"), scaler)
    return records, dual, scaler


def test_pretrain_needs_enriched_captions_for_positive_ratio(tiny_world):
    records, dual, scaler = tiny_world
    net = init_velocity_net(64, dual.embed_dim, RngStream(0, "net"), hidden=(16,), scaler=scaler)
    with pytest.raises(TrainingError):
        pretrain(net, records, dual, MixPolicy(0.5), PretrainHyper(hidden=(16,), epochs=1), seed=0)


def test_pretrain_lowers_held_out_loss(tmp_path, tiny_world):
    records, dual, scaler = tiny_world
    hyper = PretrainHyper(hidden=(32,), epochs=15, batch_size=32, lr_max=3e-3)
    net = init_velocity_net(64, dual.embed_dim, RngStream(0, "net"), hidden=hyper.hidden, scaler=scaler)
    trained, log = pretrain(net, records, dual, MixPolicy(0.0), hyper, seed=0, checkpoint_path=tmp_path / "rho_0p00")
    held = [e["held_out_loss"] for e in log.entries]
    assert held[-1] < held[0]
    assert len(log.entries) == hyper.epochs + 1
    assert load_velocity_net(tmp_path / "rho_0p00").digest() == trained.digest()

    again, _ = pretrain(net, records, dual, MixPolicy(0.0), hyper, seed=0)
    assert again.digest() == trained.digest()


def test_caption_source_reaches_the_pretrained_weights(tiny_world):
    records, dual, scaler = tiny_world
    vocab = Vocabulary.load()
    ruleset = next(rs for rs in load_rulesets() if rs.ruleset_id == "rs03_detailed")
    augmented = augment_records(records, ruleset, RuleBasedRewriter(), vocab)
    hyper = PretrainHyper(hidden=(16,), epochs=2, batch_size=32)
    net = init_velocity_net(64, dual.embed_dim, RngStream(0, "net"), hidden=hyper.hidden, scaler=scaler)
    original, _ = pretrain(net, augmented, dual, MixPolicy(0.0), hyper, seed=0)
    enriched, _ = pretrain(net, augmented, dual, MixPolicy(1.0), hyper, seed=0)
    assert original.digest() != enriched.digest()


def _mean_distance(net, target, cond, flow_cfg, samples=50):
    return float(
        np.mean([np.linalg.norm(sample_ode(net, cond, flow_cfg, RngStream(7, f"ode{i}")) - target) for i in range(samples)])
    )


@pytest.mark.slow
def test_singleton_dataset_pulls_samples_onto_the_target():
    target = np.array([2.0, -1.5])
    cond = np.zeros(1)
    x1 = np.tile(target, (512, 1))
    flow_cfg = FlowConfig(steps=10)
    net = init_velocity_net(2, 1, RngStream(3, "net"), hidden=(32, 32))
    distances = [_mean_distance(net, target, cond, flow_cfg)]
    for epochs in (10, 150):
        hyper = PretrainHyper(hidden=(32, 32), epochs=epochs, batch_size=64, lr_max=1e-2)
        trained, _ = fit_velocity(net, x1, lambda epoch: np.zeros((512, 1)), hyper, RngStream(3, "fit"))
        distances.append(_mean_distance(trained, target, cond, flow_cfg))
    assert distances[0] > distances[1] > distances[2]
    assert distances[2] < 0.2 * distances[0]
