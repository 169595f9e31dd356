"""
Tests for the reward terms, the Frechet primitive and the composite reward
"""

import math

import numpy as np
import pytest
from scipy import linalg, special

from backend.checkpoints import read_jsonl
from backend.encoders import (
    ClassifierHyper,
    DualEncoder,
    DualHyper,
    GaussianStats,
    LatentScaler,
    classify,
    embed_audio,
    embed_text,
    fit_gaussian,
    fit_ref_stats,
    init_classifier,
    init_dual,
)
from backend.errors import ConfigError, DataError, DomainError
from backend.rlrewards import (
    RewardBreakdown,
    RewardConfig,
    RewardModel,
    clap_reward,
    composite,
    fad_group_reward,
    fad_rewards,
    frechet,
    kl_div,
    kl_reward,
    mahalanobis_reward,
    standardize,
    write_reward_log,
)
from backend.synthworld import Caption, GrammarConfig, LatentConfig, Vocabulary, generate_records, latent_matrix
from backend.tensorkit import MlpParams, RngStream, gauss


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.load()


def _bias_only_dual(vocab, text_bias, audio_bias):
    e = len(text_bias)
    text = MlpParams(weights=[np.zeros((vocab.size, e))], biases=[np.asarray(text_bias, dtype=np.float64)])
    audio = MlpParams(weights=[np.zeros((4, e))], biases=[np.asarray(audio_bias, dtype=np.float64)])
    return DualEncoder(text=text, audio=audio, scaler=LatentScaler.identity(4))


def _random_cov(rng, dim):
    a = gauss(rng, (dim, dim))
    return a @ a.T + 0.1 * np.eye(dim)


def test_clap_identical_and_orthogonal(vocab):
    caption = Caption.build("a tone", vocab)
    same = _bias_only_dual(vocab, [1.0, 2.0, 0.0], [2.0, 4.0, 0.0])
    assert abs(clap_reward(same, caption, np.ones(4)) - 1.0) < 1e-12
    orth = _bias_only_dual(vocab, [1.0, 0.0, 0.0], [0.0, 3.0, 0.0])
    assert abs(clap_reward(orth, caption, np.ones(4))) < 1e-15


def test_clap_matches_dot_product(vocab):
    dual = init_dual(vocab.size, 64, DualHyper(embed_dim=8), RngStream(1, "dual"))
    caption = Caption.build("a loud tone then noise", vocab)
    latent = gauss(RngStream(1, "lat"), 64)
    expected = float(np.dot(embed_text(dual, caption), embed_audio(dual, latent)))
    assert abs(clap_reward(dual, caption, latent) - expected) < 1e-12


def test_kl_examples():
    assert kl_div([0.5, 0.5], [0.5, 0.5]) < 1e-12
    forward = kl_div([0.5, 0.5], [0.25, 0.75])
    backward = kl_div([0.25, 0.75], [0.5, 0.5])
    assert abs(forward - 0.1438) < 1e-4
    assert abs(forward - (0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0))) < 1e-8
    assert abs(backward - 0.1308) < 1e-4


def test_kl_flooring_handles_zero_mass():
    value = kl_div([0.5, 0.5], [1.0, 0.0])
    assert math.isfinite(value) and value > 10
    assert abs(kl_div([0.3, 0.7], [0.2, 0.8]) - kl_div([0.3, 0.7], [0.2 + 1e-12, 0.8 - 1e-12])) < 1e-8


def test_kl_rejects_invalid_distributions():
    with pytest.raises(DomainError):
        kl_div([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(DomainError):
        kl_div([1.5, -0.5], [0.5, 0.5])
    with pytest.raises(DomainError):
        kl_div([0.5, 0.5], [1.0 / 3] * 3)


def test_kl_is_nonnegative_on_random_simplex_pairs():
    rng = RngStream(23, "simplex")
    for _ in range(10_000):
        k = int(rng.integers(2, 9))
        p = rng.generator.dirichlet(np.ones(k))
        q = rng.generator.dirichlet(np.ones(k))
        value = kl_div(p, q)
        assert value >= 0.0
        floored = np.maximum(q, 1e-10)
        assert abs(value - max(0.0, float(np.sum(special.rel_entr(p, floored / floored.sum()))))) < 1e-9


def test_kl_reward_matches_composition():
    classifier = init_classifier(64, ClassifierHyper(hidden=(8, 4)), RngStream(2, "clf"))
    rng = RngStream(2, "lat")
    ref, gen = gauss(rng, 64), gauss(rng, 64)
    assert abs(kl_reward(classifier, ref, ref)) < 1e-12
    expected = -kl_div(classify(classifier, ref), classify(classifier, gen))
    assert abs(kl_reward(classifier, gen, ref) - expected) < 1e-12
    with pytest.raises(DataError):
        kl_reward(classifier, gen, None)


def test_kl_reward_degrades_with_corruption():
    classifier = init_classifier(64, ClassifierHyper(hidden=(8, 4)), RngStream(3, "clf"))
    rng = RngStream(3, "noise")
    ref = gauss(rng, 64)

    def mean_reward(scale):
        return np.mean([kl_reward(classifier, ref + scale * gauss(rng, 64), ref) for _ in range(100)])

    small, large = mean_reward(0.05), mean_reward(5.0)
    assert 0.0 >= small >= large


def test_frechet_closed_forms():
    rng = RngStream(4, "cov")
    mu, cov = gauss(rng, 3), _random_cov(rng, 3)
    assert frechet(mu, cov, mu, cov) <= 1e-10
    assert abs(frechet(np.zeros(3), np.eye(3), np.eye(3)[0], np.eye(3)) - 1.0) < 1e-8
    assert abs(frechet([0.0], [[1.0]], [0.0], [[4.0]]) - 1.0) < 1e-8


def test_frechet_symmetric_and_non_negative():
    rng = RngStream(5, "cov")
    for _ in range(10):
        a = (gauss(rng, 4), _random_cov(rng, 4))
        b = (gauss(rng, 4), _random_cov(rng, 4))
        ab, ba = frechet(*a, *b), frechet(*b, *a)
        assert ab >= 0
        assert abs(ab - ba) <= 1e-8


def test_frechet_matches_monte_carlo_in_one_dimension():
    rng = RngStream(6, "mc")
    a = np.sort(gauss(rng, 100_000))
    b = np.sort(1.0 + 2.0 * gauss(rng, 100_000))
    estimate = float(np.mean((a - b) ** 2))
    exact = frechet([0.0], [[1.0]], [1.0], [[4.0]])
    assert abs(exact - 2.0) < 1e-8
    assert abs(estimate - exact) / exact < 0.05


def test_frechet_rejects_asymmetric_covariance():
    with pytest.raises(DomainError):
        frechet(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.eye(2))


def _brute_force_frechet(mu1, s1, mu2, s2):
    covmean = linalg.sqrtm(s1 @ s2)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(np.real(covmean)))


def _brute_force_fit(e, eps):
    return e.mean(axis=0), np.cov(e, rowvar=False) + eps * np.eye(e.shape[1])


def test_leave_one_out_matches_brute_force():
    rng = RngStream(7, "loo")
    emb = gauss(rng, (6, 2))
    ref = fit_gaussian(gauss(rng, (50, 2)) + 0.5)
    rewards = fad_group_reward(emb, ref, eps=1e-6)
    mu, cov = _brute_force_fit(emb, 1e-6)
    full = _brute_force_frechet(mu, cov, ref.mean, ref.cov)
    for i in range(6):
        mu_i, cov_i = _brute_force_fit(np.delete(emb, i, axis=0), 1e-6)
        expected = _brute_force_frechet(mu_i, cov_i, ref.mean, ref.cov) - full
        assert abs(rewards[i] - expected) < 1e-9


def test_leave_one_out_symmetry_and_equivariance():
    rng = RngStream(8, "loo")
    ref = fit_gaussian(gauss(rng, (40, 2)))
    same = fad_group_reward(np.tile(gauss(rng, 2), (5, 1)), ref)
    assert np.max(same) - np.min(same) < 1e-12

    emb = gauss(rng, (7, 2))
    perm = np.array([3, 0, 6, 1, 5, 2, 4])
    assert np.max(np.abs(fad_group_reward(emb[perm], ref) - fad_group_reward(emb, ref)[perm])) < 1e-9


def test_small_groups_need_mahalanobis_mode():
    rng = RngStream(9, "small")
    ref = fit_gaussian(gauss(rng, (40, 3)))
    emb = gauss(rng, (4, 3))
    with pytest.raises(ConfigError):
        fad_group_reward(emb, ref)
    auto = fad_rewards(emb, ref, RewardConfig(fad_mode="auto"))
    inv = np.linalg.inv(ref.cov)
    expected = [-(e - ref.mean) @ inv @ (e - ref.mean) for e in emb]
    assert np.max(np.abs(auto - expected)) < 1e-8
    assert np.array_equal(auto, mahalanobis_reward(emb, ref))
    with pytest.raises(ConfigError):
        fad_rewards(emb, ref, RewardConfig(fad_mode="loo"))


def test_mahalanobis_uses_the_reference_covariance_as_is():
    ref = GaussianStats(mean=np.array([1.0, -1.0]), cov=np.diag([2.0, 0.5]), n=10)
    emb = np.array([[3.0, -1.0], [1.0, 0.0], [0.0, 0.0]])
    assert np.max(np.abs(mahalanobis_reward(emb, ref) - np.array([-2.0, -2.0, -2.5]))) < 1e-12


def test_reward_config_validation():
    with pytest.raises(ConfigError):
        RewardConfig(w_clap=0.0, w_kl=0.0, w_fad=0.0)
    with pytest.raises(ConfigError):
        RewardConfig(w_fad=float("inf"))
    with pytest.raises(ConfigError):
        RewardConfig.variant("loudness")
    assert RewardConfig.variant("kl").weights == {"r_clap": 0.0, "r_kl": 1.0, "r_fad": 0.0}
    assert RewardConfig().digest() == RewardConfig.variant("wt").digest()
    assert RewardConfig().digest() != RewardConfig(standardize=False).digest()


def _breakdowns(rows):
    return [RewardBreakdown(f"s{i}", *row) for i, row in enumerate(rows)]


def test_composite_raw_sums():
    rows = [(0.5, -0.2, 0.1), (0.3, -0.4, 0.2)]
    clap_only = composite(_breakdowns(rows), RewardConfig(w_clap=1.0, w_kl=0.0, w_fad=0.0, standardize=False))
    assert np.allclose(clap_only, [0.5, 0.3], atol=0)
    breakdowns = _breakdowns(rows)
    totals = composite(breakdowns, RewardConfig(standardize=False))
    assert abs(totals[0] - 0.4) < 1e-12
    assert breakdowns[0].total == totals[0]


def test_composite_standardizes_each_term():
    rows = [(1.0, 0.0, 5.0), (2.0, 0.0, 5.0), (3.0, 0.0, 5.0)]
    totals = composite(_breakdowns(rows), RewardConfig(w_clap=2.0, w_kl=1.0, w_fad=1.0))
    assert np.allclose(totals, [-2.4494897, 0.0, 2.4494897], atol=1e-6)
    z = standardize(gauss(RngStream(10, "z"), 9))
    assert abs(z.mean()) < 1e-6 and abs(z.var() - 1.0) < 1e-6


def test_composite_needs_every_term():
    with pytest.raises(DataError):
        composite([RewardBreakdown("s0", 0.1, None, 0.2)], RewardConfig())
    with pytest.raises(DataError):
        composite([], RewardConfig())


def test_reward_model_scores_a_group(tmp_path, vocab):
    records = generate_records(400, 13, GrammarConfig(), LatentConfig(), vocab)
    scaler = LatentScaler.fit(latent_matrix(records))
    classifier = init_classifier(64, ClassifierHyper(hidden=(8, 3)), RngStream(13, "clf"), scaler)
    dual = init_dual(vocab.size, 64, DualHyper(embed_dim=6, text_hidden=8, audio_hidden=8), RngStream(13, "dual"), scaler)
    model = RewardModel(dual, classifier, fit_ref_stats(records, classifier), RewardConfig())

    target = records[0]
    gen = latent_matrix(records[1:9])
    ids = [f"{target.record_id}/{g}" for g in range(8)]
    breakdowns = model.score_group(target.original, target.scene, target.latent, gen, ids)
    assert [b.sample_id for b in breakdowns] == ids
    for b in breakdowns:
        assert -1.0 <= b.r_clap <= 1.0
        assert b.r_kl <= 0.0
        assert math.isfinite(b.total)
    assert abs(sum(b.total for b in breakdowns)) < 1e-6

    with pytest.raises(DataError):
        model.score_group(target.original, target.scene, target.latent, gen, ids[:3])

    log_path = write_reward_log(tmp_path / "rewards.jsonl", breakdowns, "g0", model.cfg)
    rows = read_jsonl(log_path)
    assert len(rows) == 8
    assert rows[0]["config_digest"] == model.cfg.digest()
    assert rows[0]["group_id"] == "g0"
