"""
Tests for the experiment configuration, evaluation metrics, comparison
tables and the staged pipeline
"""

import json
from pathlib import Path

import pytest

import config
import run
from backend.bench import (
    BASELINE_ID,
    DATAAUG_ID,
    EvalReport,
    ExperimentConfig,
    NoiseGenerator,
    OracleGenerator,
    Pipeline,
    compare_table,
    directional_summary,
    evaluate,
    exit_code,
    format_table,
    grpo_model_id,
    read_table_csv,
)
from backend.encoders import ClassifierHyper, DualHyper, LatentScaler, init_classifier, init_dual
from backend.errors import ConfigError, DataError, DependencyError, PipelineError, ProvenanceError
from backend.synthworld import GrammarConfig, LatentConfig, Vocabulary, generate_records, latent_matrix
from backend.tensorkit import RngStream

DEFAULT_CONFIG = str(Path(__file__).parent / "data" / "default_experiment.json")


# configuration


def test_default_config_file_matches_the_defaults():
    assert ExperimentConfig.load(DEFAULT_CONFIG).digest() == ExperimentConfig().digest()


def test_unknown_config_keys_are_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 1, "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"grpo": {"group_sise": 4}})


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\"seed\": ", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"reward_variants": ["clap", "clap"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"augment": {"rho": 1.5}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"data": {"train_size": 50}})


def test_overrides_change_the_digest():
    cfg = ExperimentConfig()
    base = cfg.digest()
    seeded = cfg.with_overrides(seed=3)
    assert seeded.seed == 3 and seeded.digest() != base
    mixed = cfg.with_overrides(rho=0.25)
    assert mixed.augment.rho == 0.25 and not mixed.augment.auto_select_rho
    assert cfg.with_overrides(reward_variants=["clap"]).reward_variants == ("clap",)
    with pytest.raises(ConfigError):
        cfg.with_overrides(reward_variants=["bogus"])


# evaluation


@pytest.fixture(scope="module")
def eval_world():
    vocab = Vocabulary.load()
    testset = generate_records(60, 31, GrammarConfig(), LatentConfig(), vocab, split="eval")
    scaler = LatentScaler.fit(latent_matrix(testset))
    classifier = init_classifier(64, ClassifierHyper(hidden=(8, 3)), RngStream(31, "clf"), scaler)
    dual = init_dual(vocab.size, 64, DualHyper(embed_dim=4, text_hidden=8, audio_hidden=8), RngStream(31, "dual"), scaler)
    return testset, classifier, dual, scaler


def test_oracle_scores_perfectly(eval_world):
    testset, classifier, dual, _ = eval_world
    report = evaluate(OracleGenerator(), testset, dual, classifier, n_boot=20, seed=0)
    assert report.model_id == "oracle"
    assert abs(report.fd_mean) < 1e-6
    assert abs(report.kl_mean) < 1e-8
    assert report.n_items == 60 and report.n_boot == 20
    assert set(report.encoder_digests) == {"classifier", "dual"}


def test_noise_generator_is_further_than_the_oracle(eval_world):
    testset, classifier, dual, scaler = eval_world
    oracle = evaluate(OracleGenerator(), testset, dual, classifier, n_boot=1)
    noise = evaluate(NoiseGenerator(scaler, 0), testset, dual, classifier, n_boot=1)
    assert noise.fd_mean > oracle.fd_mean
    assert noise.kl_mean > oracle.kl_mean
    assert (noise.fd_std, noise.kl_std, noise.clap_std) == (0.0, 0.0, 0.0)


def test_evaluation_is_reproducible(eval_world):
    testset, classifier, dual, scaler = eval_world
    a = evaluate(NoiseGenerator(scaler, 4), testset, dual, classifier, n_boot=10, seed=2)
    b = evaluate(NoiseGenerator(scaler, 4), testset, dual, classifier, n_boot=10, seed=2)
    assert a.to_dict() == b.to_dict()
    assert a.fd_std > 0


def test_evaluation_guards(eval_world):
    testset, classifier, dual, _ = eval_world
    with pytest.raises(DataError):
        evaluate(OracleGenerator(), testset[:4], dual, classifier)
    with pytest.raises(DataError):
        evaluate(OracleGenerator(), testset, dual, classifier, train_ids=[testset[7].record_id])
    with pytest.raises(ConfigError):
        evaluate(OracleGenerator(), testset, dual, classifier, n_boot=0)


def test_report_persists(tmp_path, eval_world):
    testset, classifier, dual, _ = eval_world
    report = evaluate(OracleGenerator(), testset, dual, classifier, n_boot=3, config_digest="abc")
    loaded = EvalReport.load(report.save(tmp_path / "eval" / "oracle.json"))
    assert loaded.to_dict() == report.to_dict()
    assert "wall_time" not in json.loads((tmp_path / "eval" / "oracle.json").read_text(encoding="utf-8"))
    with pytest.raises(DataError):
        EvalReport.load(tmp_path / "eval" / "nothing.json")


# comparison tables


def _report(model_id, fd, kl, clap, digests=None):
    return EvalReport(
        model_id=model_id,
        fd_mean=fd,
        fd_std=0.01,
        kl_mean=kl,
        kl_std=0.02,
        clap_mean=clap,
        clap_std=0.03,
        n_items=500,
        n_boot=200,
        encoder_digests=digests or {"classifier": "c1", "dual": "d1"},
    )


def test_table_marks_every_tied_best_cell():
    text = format_table([_report("a", 1.0, 0.5, 0.2), _report("b", 1.0, 0.4, 0.1), _report("c", 2.0, 0.6, 0.3)])
    rows = {line.split(" | ")[0].strip(): line for line in text.splitlines() if " | " in line}
    assert "FD_emb ↓" in rows["model"] and "CLAP_dual ↑" in rows["model"]
    assert rows["a"].count("**") == 2
    assert rows["b"].count("**") == 4
    assert rows["c"].count("**") == 2
    assert "1.0000 ± 0.0100" in rows["a"]


def test_compare_table_writes_csv_and_text(tmp_path):
    reports = [_report("dataaug", 1.25, 0.5, 0.2), _report("grpo_clap", 1.5, 0.55, 0.31234567891234)]
    paths = compare_table(reports, tmp_path / "tables" / "summary_table")
    assert paths["txt"].read_text(encoding="utf-8").startswith("# ")
    df = read_table_csv(paths["csv"])
    assert list(df.columns) == [
        "model",
        "FD_emb_mean",
        "FD_emb_std",
        "KL_cls_mean",
        "KL_cls_std",
        "CLAP_dual_mean",
        "CLAP_dual_std",
        "n_items",
        "n_boot",
    ]
    assert list(df["model"]) == ["dataaug", "grpo_clap"]
    assert df["CLAP_dual_mean"][1] == 0.31234567891234


def test_compare_table_refuses_mixed_encoders(tmp_path):
    reports = [_report("a", 1.0, 0.5, 0.2), _report("b", 1.0, 0.5, 0.2, {"classifier": "c2", "dual": "d1"})]
    with pytest.raises(ProvenanceError):
        compare_table(reports, tmp_path / "t")
    with pytest.raises(DataError):
        compare_table(reports[:1], tmp_path / "t")
    with pytest.raises(DataError):
        read_table_csv(tmp_path / "t.csv")


# multi-seed summary


def _seed_reports():
    return {
        BASELINE_ID: _report(BASELINE_ID, 1.2, 1.1, 0.05),
        DATAAUG_ID: _report(DATAAUG_ID, 1.0, 1.0, 0.1),
        grpo_model_id("clap"): _report("grpo_clap", 1.0, 1.0, 0.3),
        grpo_model_id("kl"): _report("grpo_kl", 1.0, 0.5, 0.1),
        grpo_model_id("fad"): _report("grpo_fad", 0.5, 1.0, 0.1),
        grpo_model_id("wt"): _report("grpo_wt", 1.02, 0.98, 0.1),
    }


def test_directional_summary_counts_claims():
    summary = directional_summary([_seed_reports() for _ in range(5)])
    assert len(summary) == 6
    assert bool(summary["passed"].all())
    assert list(summary["held"]) == [5] * 6
    assert list(summary["needed"]) == [4, 3, 4, 4, 4, 4]


def test_directional_summary_needs_every_seed():
    partial = _seed_reports()
    del partial[grpo_model_id("fad")]
    summary = directional_summary([_seed_reports(), partial])
    fad_row = summary[summary["claim"] == "FAD-only GRPO improves FD_emb"].iloc[0]
    assert fad_row["seeds"] == 1
    assert not bool(fad_row["passed"])
    with pytest.raises(DataError):
        directional_summary([])


# pipeline


def test_stage_without_inputs_reports_the_missing_dependency(tmp_path):
    pipeline = Pipeline(ExperimentConfig(), tmp_path / "run")
    with pytest.raises(PipelineError) as info:
        pipeline.run(["grpo"])
    assert info.value.stage == "grpo"
    assert isinstance(info.value.cause, DependencyError)
    assert exit_code(info.value) == 3
    timings = (tmp_path / "run" / "timings.jsonl").read_text(encoding="utf-8")
    assert '"failed"' in timings


def test_unknown_stage_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        Pipeline(ExperimentConfig(), tmp_path).run(["train"])


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "RESULTS_DB", str(tmp_path / "results.db"))
    out = str(tmp_path / "run")
    assert run.main(["grpo", "--config", DEFAULT_CONFIG, "--out", out]) == 3
    assert run.main(["grpo", "--config", str(tmp_path / "missing.json"), "--out", out]) == 2
    assert run.main(["eval", "--config", DEFAULT_CONFIG, "--out", out, "--rho", "2.0"]) == 2


def _tiny_config(seed=0):
    with open(DEFAULT_CONFIG, "r", encoding="utf-8") as f:
        data = json.load(f)
    data["seed"] = seed
    data["data"].update(train_size=240, eval_size=40, val_size=16, workers=1)
    data["augment"].update(selection_subset=8)
    data["classifier"].update(hidden=[8, 3], epochs=10, min_records=200)
    data["dual"].update(embed_dim=4, text_hidden=8, audio_hidden=8, epochs=2, batch_size=16, candidates=8)
    data["pretrain"].update(hidden=[16], epochs=2, batch_size=32)
    data["flow"].update(steps=4)
    data["grpo"].update(group_size=4, prompts_per_iter=2, iterations=2, checkpoint_every=1, eval_every=1, eval_prompts=4)
    data["eval"].update(n_boot=5)
    return ExperimentConfig.from_dict(data)


@pytest.mark.slow
def test_tiny_pipeline_is_deterministic_and_resumable(tmp_path):
    cfg = _tiny_config()
    first = Pipeline(cfg, tmp_path / "a").run()
    second = Pipeline(cfg, tmp_path / "b").run()

    for name in ("summary_table.txt", "summary_table.csv", "augmentation_table.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    reports = sorted(p.name for p in (first / "eval").glob("*.json"))
    assert reports == sorted(
        [f"{BASELINE_ID}.json", f"{DATAAUG_ID}.json"] + [f"{grpo_model_id(v)}.json" for v in cfg.reward_variants]
    )
    for name in reports:
        assert (first / "eval" / name).read_bytes() == (second / "eval" / name).read_bytes()

    Pipeline(cfg, tmp_path / "a", resume=True).run()
    lines = (first / "timings.jsonl").read_text(encoding="utf-8").splitlines()
    resumed = [json.loads(line) for line in lines[-7:]]
    assert [r["status"] for r in resumed] == ["skipped"] * 7
