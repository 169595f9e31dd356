"""
Experiment harness: configuration, the staged pipeline, evaluation metrics
with bootstrap uncertainty, and the comparison tables
"""

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.captionaug import (
    FidelityScorer,
    MixPolicy,
    augment_records,
    load_rulesets,
    select_configuration,
)
from backend.checkpoints import write_jsonl
from backend.encoders import (
    REF_EPS,
    ClassifierHyper,
    ClassifierModel,
    DualEncoder,
    DualHyper,
    LatentScaler,
    classify,
    embed_audios,
    embed_for_fad,
    embed_texts,
    fit_gaussian,
    fit_ref_stats,
    load_classifier,
    load_dual,
    load_ref_stats,
    save_classifier,
    save_dual,
    save_ref_stats,
    train_classifier,
    train_dual,
)
from backend.errors import (
    ConfigError,
    DataError,
    DependencyError,
    LabError,
    PipelineError,
    ProvenanceError,
)
from backend.flowmatch import (
    FlowConfig,
    PretrainHyper,
    VelocityNet,
    init_velocity_net,
    load_velocity_net,
    pretrain,
    sample_ode,
    save_velocity_net,
)
from backend.grpo import REWARD_LOG_NAME, TRAIN_LOG_NAME, GrpoConfig, probe_clap, train_grpo
from backend.results_store import ResultsStore
from backend.rewriters import REWRITER_KINDS, build_rewriter, describe_rewriter
from backend.rlrewards import REWARD_VARIANTS, RewardConfig, RewardModel, frechet_stats, kl_div
from backend.synthworld import (
    DatasetRecord,
    GrammarConfig,
    LatentConfig,
    Vocabulary,
    generate_records,
    latent_matrix,
    read_dataset,
    read_dataset_meta,
    write_dataset,
)
from backend.tensorkit import RngStream, gauss

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "augment", "train-encoders", "pretrain", "grpo", "eval", "report")
SPLITS = ("train", "val", "eval")
PROMPT_SOURCES = ("original", "enriched")

METRICS = (
    ("FD_emb", "fd", "lower"),
    ("KL_cls", "kl", "lower"),
    ("CLAP_dual", "clap", "higher"),
)
METRIC_BACKBONES = {
    "FD_emb": "Frechet distance between Gaussian fits of event-classifier penultimate embeddings",
    "KL_cls": "KL from the reference clip's event-classifier distribution to the generated clip's, averaged",
    "CLAP_dual": "caption/audio cosine in the lab's contrastive dual-encoder space, averaged",
}
UNCERTAINTY_NOTE = "± is the population std of each metric over bootstrap resamples of the eval items"

BASELINE_ID = "baseline_rho0"
DATAAUG_ID = "dataaug"
WEIGHTED_VARIANT = "wt"


def grpo_model_id(variant: str) -> str:
    return f"grpo_{variant}"


# configuration


@dataclass
class DataConfig:
    train_size: int = 4000
    eval_size: int = 500
    val_size: int = 256
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    workers: int = 4


@dataclass
class AugmentConfig:
    ruleset: Optional[str] = None  # None: pick the best rule set on the selection subset
    selection_subset: int = 64
    rho: float = 0.5
    rho_scan: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    auto_select_rho: bool = False
    rewriter_kinds: Tuple[str, ...] = ("rule",)
    retries: int = 2


@dataclass
class EvalConfig:
    n_boot: int = 200
    prompt_source: str = "enriched"
    excel: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    classifier: ClassifierHyper = field(default_factory=ClassifierHyper)
    dual: DualHyper = field(default_factory=DualHyper)
    flow: FlowConfig = field(default_factory=FlowConfig)
    pretrain: PretrainHyper = field(default_factory=PretrainHyper)
    reward: RewardConfig = field(default_factory=RewardConfig)
    reward_variants: Tuple[str, ...] = REWARD_VARIANTS
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        self.data.grammar.validate()
        self.classifier.validate()
        self.dual.validate()
        self.pretrain.validate()
        MixPolicy(self.augment.rho)
        for rho in self.augment.rho_scan:
            MixPolicy(rho)
        if self.augment.auto_select_rho and not self.augment.rho_scan:
            raise ConfigError("auto_select_rho needs a non-empty rho_scan")
        if not self.augment.rewriter_kinds:
            raise ConfigError("at least one rewriter kind is required")
        unknown = [k for k in self.augment.rewriter_kinds if k not in REWRITER_KINDS]
        if unknown:
            raise ConfigError(f"unknown rewriter kinds {unknown}, expected any of {', '.join(REWRITER_KINDS)}")
        unknown = [v for v in self.reward_variants if v not in REWARD_VARIANTS]
        if unknown or len(set(self.reward_variants)) != len(self.reward_variants):
            raise ConfigError(f"reward variants must be distinct members of {REWARD_VARIANTS}, got {self.reward_variants}")
        if self.eval.prompt_source not in PROMPT_SOURCES or self.grpo.prompt_source not in PROMPT_SOURCES:
            raise ConfigError(f"prompt source must be one of {PROMPT_SOURCES}")
        if self.eval.n_boot < 1:
            raise ConfigError(f"n_boot must be at least 1, got {self.eval.n_boot}")
        need = self.classifier.hidden[-1] + 2
        if self.data.eval_size < need:
            raise ConfigError(f"eval set of {self.data.eval_size} is too small for {need - 2}-d embedding statistics")
        if self.data.train_size < self.classifier.min_records:
            raise ConfigError(
                f"train_size {self.data.train_size} is below the classifier minimum {self.classifier.min_records}"
            )
        if self.data.val_size < 1:
            raise ConfigError("val_size must be positive")
        if self.data.train_size < self.grpo.prompts_per_iter:
            raise ConfigError("fewer training prompts than prompts per GRPO iteration")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        return _build_dataclass(cls, data, "").validate()

    @classmethod
    def load(cls, path: os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON (line {e.lineno}): {e.msg}") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(
        self,
        seed: Optional[int] = None,
        rho: Optional[float] = None,
        reward_variants: Optional[Sequence[str]] = None,
    ) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if rho is not None:
            cfg = replace(cfg, augment=replace(cfg.augment, rho=float(rho), auto_select_rho=False))
        if reward_variants is not None:
            cfg = replace(cfg, reward_variants=tuple(reward_variants))
        return cfg.validate()


def _build_dataclass(cls, data: Any, path: str):
    where = path or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        declared = known[name]
        default = declared.default_factory() if declared.default_factory is not MISSING else declared.default
        if is_dataclass(default):
            kwargs[name] = _build_dataclass(type(default), value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid {where}: {e}") from e


# generators under evaluation


class LatentGenerator:
    """Produces one raw latent per eval record"""

    model_id = "generator"

    def generate(self, records: Sequence[DatasetRecord], prompt_source: str = "enriched") -> np.ndarray:
        raise NotImplementedError


class FlowGenerator(LatentGenerator):
    """Deterministic Euler samples of a velocity net, fixed noise per record"""

    def __init__(self, net: VelocityNet, dual: DualEncoder, flow_cfg: FlowConfig, seed: int, model_id: str):
        self.net = net
        self.dual = dual
        self.flow_cfg = flow_cfg
        self.seed = seed
        self.model_id = model_id

    def generate(self, records: Sequence[DatasetRecord], prompt_source: str = "enriched") -> np.ndarray:
        conds = embed_texts(self.dual, [r.caption(prompt_source) for r in records])
        samples = [
            sample_ode(self.net, cond, self.flow_cfg, RngStream(self.seed, f"eval/{r.record_id}"))
            for r, cond in zip(records, conds)
        ]
        return self.net.scaler.inverse(np.stack(samples))


class OracleGenerator(LatentGenerator):
    model_id = "oracle"

    def generate(self, records: Sequence[DatasetRecord], prompt_source: str = "enriched") -> np.ndarray:
        return latent_matrix(records)


class NoiseGenerator(LatentGenerator):
    """Standard-normal latents mapped through a scaler; ignores the prompt"""

    model_id = "noise"

    def __init__(self, scaler: LatentScaler, seed: int):
        self.scaler = scaler
        self.seed = seed

    def generate(self, records: Sequence[DatasetRecord], prompt_source: str = "enriched") -> np.ndarray:
        z = gauss(RngStream(self.seed, "eval/noise"), (len(records), self.scaler.dim))
        return self.scaler.inverse(z)


# evaluation


@dataclass
class EvalReport:
    model_id: str
    fd_mean: float
    fd_std: float
    kl_mean: float
    kl_std: float
    clap_mean: float
    clap_std: float
    n_items: int
    n_boot: int
    config_digest: str = ""
    encoder_digests: Dict[str, str] = field(default_factory=dict)
    backbones: Dict[str, str] = field(default_factory=lambda: dict(METRIC_BACKBONES))
    uncertainty: str = UNCERTAINTY_NOTE
    wall_time: float = 0.0

    def metric(self, key: str) -> Tuple[float, float]:
        return getattr(self, f"{key}_mean"), getattr(self, f"{key}_std")

    def to_dict(self) -> Dict[str, Any]:
        """Persisted form; wall time is kept out so reruns compare byte for byte."""
        data = asdict(self)
        data.pop("wall_time")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        allowed = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in allowed})

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
        return path

    @classmethod
    def load(cls, path: os.PathLike) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise DataError(f"eval report not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _metric_values(gen_emb, ref_emb, kl_items, clap_items, idx) -> Tuple[float, float, float]:
    fd = frechet_stats(fit_gaussian(gen_emb[idx], REF_EPS), fit_gaussian(ref_emb[idx], REF_EPS))
    return fd, float(np.mean(kl_items[idx])), float(np.mean(clap_items[idx]))


def evaluate(
    generator: LatentGenerator,
    testset: Sequence[DatasetRecord],
    dual: DualEncoder,
    classifier: ClassifierModel,
    n_boot: int = 200,
    seed: int = 0,
    train_ids: Sequence[str] = (),
    model_id: Optional[str] = None,
    config_digest: str = "",
    prompt_source: str = "enriched",
) -> EvalReport:
    """FD_emb, KL_cls and CLAP_dual on the eval set, ± from bootstrap resampling."""
    started = time.perf_counter()
    model_id = model_id or generator.model_id
    if n_boot < 1:
        raise ConfigError(f"n_boot must be at least 1, got {n_boot}")
    n = len(testset)
    need = classifier.embed_dim + 2
    if n < need:
        raise DataError(f"eval set has {n} items; embedding statistics need at least {need}")
    overlap = sorted(set(r.record_id for r in testset) & set(train_ids))
    if overlap:
        raise DataError(f"eval set overlaps training data ({len(overlap)} ids, e.g. {overlap[0]})")

    ref = latent_matrix(testset)
    gen = np.asarray(generator.generate(testset, prompt_source), dtype=np.float64)
    if gen.shape != ref.shape:
        raise DataError(f"generator returned {gen.shape}, expected {ref.shape}")
    p_ref, p_gen = classify(classifier, ref), classify(classifier, gen)
    kl_items = np.array([kl_div(p, q) for p, q in zip(p_ref, p_gen)])
    text = embed_texts(dual, [r.caption(prompt_source) for r in testset])
    clap_items = np.sum(text * embed_audios(dual, gen), axis=1)
    gen_emb, ref_emb = embed_for_fad(classifier, gen), embed_for_fad(classifier, ref)

    point = _metric_values(gen_emb, ref_emb, kl_items, clap_items, np.arange(n))
    rng = RngStream(seed, f"bootstrap/{model_id}")
    boots = np.array([_metric_values(gen_emb, ref_emb, kl_items, clap_items, rng.integers(0, n, n)) for _ in range(n_boot)])
    std = boots.std(axis=0) if n_boot > 1 else np.zeros(3)

    report = EvalReport(
        model_id=model_id,
        fd_mean=float(point[0]),
        fd_std=float(std[0]),
        kl_mean=float(point[1]),
        kl_std=float(std[1]),
        clap_mean=float(point[2]),
        clap_std=float(std[2]),
        n_items=n,
        n_boot=n_boot,
        config_digest=config_digest,
        encoder_digests={"classifier": classifier.digest(), "dual": dual.digest()},
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        f"Evaluated {model_id}: FD_emb {report.fd_mean:.4f} ± {report.fd_std:.4f}, "
        f"KL_cls {report.kl_mean:.4f} ± {report.kl_std:.4f}, CLAP_dual {report.clap_mean:.4f} ± {report.clap_std:.4f}"
    )
    return report


# comparison tables


def _check_comparable(reports: Sequence[EvalReport]):
    if len(reports) < 2:
        raise DataError(f"a comparison needs at least 2 reports, got {len(reports)}")
    digests = {json.dumps(r.encoder_digests, sort_keys=True) for r in reports}
    if len(digests) > 1:
        raise ProvenanceError("reports were computed with different frozen encoders; metrics are not comparable")


def table_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        row = {"model": r.model_id}
        for column, key, _ in METRICS:
            row[f"{column}_mean"], row[f"{column}_std"] = r.metric(key)
        row["n_items"] = r.n_items
        row["n_boot"] = r.n_boot
        rows.append(row)
    return pd.DataFrame(rows)


def best_rows(reports: Sequence[EvalReport]) -> Dict[str, List[int]]:
    """Row indices holding the best mean per metric column; ties mark every tied row."""
    best = {}
    for column, key, direction in METRICS:
        means = [r.metric(key)[0] for r in reports]
        target = min(means) if direction == "lower" else max(means)
        best[column] = [i for i, m in enumerate(means) if m == target]
    return best


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table; columns FD, KL, CLAP with direction arrows, best cells in **bold**."""
    _check_comparable(reports)
    best = best_rows(reports)
    arrows = {"lower": "↓", "higher": "↑"}
    header = ["model"] + [f"{column} {arrows[direction]}" for column, _, direction in METRICS]
    body = []
    for i, r in enumerate(reports):
        cells = [r.model_id]
        for column, key, _ in METRICS:
            mean, std = r.metric(key)
            cell = f"{mean:.4f} ± {std:.4f}"
            cells.append(f"**{cell}**" if i in best[column] else cell)
        body.append(cells)
    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]

    def line(cells: Sequence[str]) -> str:
        return " | ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    out = [f"# {UNCERTAINTY_NOTE} (n_boot={reports[0].n_boot}, n_items={reports[0].n_items})"]
    out += [f"# {column}: {METRIC_BACKBONES[column]}" for column, _, _ in METRICS]
    out += [line(header), "-+-".join("-" * w for w in widths)]
    out += [line(cells) for cells in body]
    return "\n".join(out) + "\n"


def _export_excel(df: pd.DataFrame, path: Path, title: str) -> Path:
    try:
        from openpyxl import Workbook
        from openpyxl.styles import Font, PatternFill

        wb = Workbook()
        ws = wb.active
        ws.title = title[:31]
        header_font = Font(bold=True, size=12)
        header_fill = PatternFill(start_color="CCCCCC", end_color="CCCCCC", fill_type="solid")
        for col, name in enumerate(df.columns, start=1):
            cell = ws.cell(row=1, column=col, value=name)
            cell.font = header_font
            cell.fill = header_fill
        for row, values in enumerate(df.itertuples(index=False), start=2):
            for col, value in enumerate(values, start=1):
                ws.cell(row=row, column=col, value=value.item() if hasattr(value, "item") else value)
        for column in ws.columns:
            width = max(len(str(cell.value)) for cell in column if cell.value is not None)
            ws.column_dimensions[column[0].column_letter].width = min(width + 2, 50)
        wb.save(path)
        logger.info(f"Exported table to Excel: {path}")
        return path
    except ImportError:
        logger.error("openpyxl not installed. Install with: pip install openpyxl")
        raise


def compare_table(reports: Sequence[EvalReport], path_stem: os.PathLike, excel: bool = False) -> Dict[str, Path]:
    """Write ``<stem>.csv`` and ``<stem>.txt`` (and ``<stem>.xlsx``); returns the written paths."""
    text = format_table(reports)
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    df = table_frame(reports)
    paths = {"csv": stem.with_suffix(".csv"), "txt": stem.with_suffix(".txt")}
    try:
        df.to_csv(paths["csv"], index=False, lineterminator="\n")
        with open(paths["txt"], "w", encoding="utf-8") as f:
            f.write(text)
        if excel:
            paths["xlsx"] = _export_excel(df, stem.with_suffix(".xlsx"), stem.name)
    except Exception as e:
        logger.error(f"Error writing comparison table {stem}: {e}")
        raise
    logger.info(f"Wrote comparison table {stem} ({len(reports)} rows)")
    return paths


def read_table_csv(path: os.PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"table not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


# artifact layout


class ArtifactLayout:
    """Paths of every artifact the pipeline writes under one root"""

    def __init__(self, root: os.PathLike):
        self.root = Path(root)

    def dataset(self, split: str) -> Path:
        return self.root / "dataset" / split

    def augmented(self, split: str) -> Path:
        return self.root / "augmented" / split

    @property
    def selection(self) -> Path:
        return self.root / "augment" / "selection.json"

    @property
    def classifier(self) -> Path:
        return self.root / "encoders" / "classifier"

    @property
    def dual(self) -> Path:
        return self.root / "encoders" / "dual"

    @property
    def ref_stats(self) -> Path:
        return self.root / "encoders" / "ref_stats"

    @property
    def encoder_log(self) -> Path:
        return self.root / "encoders" / TRAIN_LOG_NAME

    def pretrain(self, rho: float) -> Path:
        return self.root / "pretrain" / _ratio_name(rho)

    def pretrain_log(self, rho: float) -> Path:
        return self.root / "pretrain" / f"{_ratio_name(rho)}_log.jsonl"

    @property
    def rho_selection(self) -> Path:
        return self.root / "pretrain" / "rho_selection.json"

    def grpo_dir(self, variant: str) -> Path:
        return self.root / "grpo" / variant

    def grpo_final(self, variant: str) -> Path:
        return self.grpo_dir(variant) / "final"

    def report(self, model_id: str) -> Path:
        return self.root / "eval" / f"{model_id}.json"

    @property
    def summary_stem(self) -> Path:
        return self.root / "summary_table"

    @property
    def augmentation_stem(self) -> Path:
        return self.root / "augmentation_table"

    def marker(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"

    @property
    def timings(self) -> Path:
        return self.root / "timings.jsonl"

    @property
    def config(self) -> Path:
        return self.root / "config.json"


def _ratio_name(rho: float) -> str:
    return "rho_" + f"{rho:.2f}".replace(".", "p")


def _exists(path: Path) -> bool:
    """True for a directory, a file, or a checkpoint stem with its header."""
    return path.exists() or path.with_suffix(".json").exists()


def _write_json(path: Path, data: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True, indent=2)
    return path


def _read_json(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# mixing ratio


def pretrain_ratio(
    rho: float,
    train: Sequence[DatasetRecord],
    dual: DualEncoder,
    cfg: ExperimentConfig,
    checkpoint_path: Optional[os.PathLike] = None,
    log_path: Optional[os.PathLike] = None,
) -> VelocityNet:
    """Pretrain one velocity net at mixing ratio ``rho``; every ratio shares the same initial weights."""
    scaler = LatentScaler.fit(latent_matrix(train))
    net = init_velocity_net(
        scaler.dim, dual.embed_dim, RngStream(cfg.seed, "velocity/init"), cfg.pretrain.hidden, scaler
    )
    net, log = pretrain(
        net, train, dual, MixPolicy(rho), cfg.pretrain, cfg.seed, checkpoint_path, cfg.eval.prompt_source
    )
    if log_path:
        write_jsonl(log_path, [dict(entry, rho=rho) for entry in log.entries])
    return net


def select_ratio(
    candidates: Sequence[float],
    train: Sequence[DatasetRecord],
    val: Sequence[DatasetRecord],
    dual: DualEncoder,
    cfg: ExperimentConfig,
    layout: Optional[ArtifactLayout] = None,
) -> Tuple[float, Dict[float, float], Dict[float, VelocityNet]]:
    """Pretrain once per candidate ratio and keep the best validation CLAP; ties go to the lower ratio."""
    if not candidates:
        raise ConfigError("no mixing ratios to choose from")
    conds = embed_texts(dual, [r.caption(cfg.eval.prompt_source) for r in val])
    probes, nets = {}, {}
    for rho in sorted(set(float(c) for c in candidates)):
        nets[rho] = pretrain_ratio(
            rho,
            train,
            dual,
            cfg,
            layout.pretrain(rho) if layout else None,
            layout.pretrain_log(rho) if layout else None,
        )
        probes[rho] = probe_clap(nets[rho], val, conds, dual, cfg.flow, cfg.seed, cfg.eval.prompt_source)
        logger.info(f"Mixing ratio {rho:.2f}: validation CLAP {probes[rho]:.4f}")
    best = min(probes, key=lambda rho: (-probes[rho], rho))
    return best, probes, nets


# pipeline


class Pipeline:
    """Runs the stages in order, writing everything under one artifact directory"""

    def __init__(
        self,
        cfg: ExperimentConfig,
        out_dir: os.PathLike,
        resume: bool = False,
        settings: Any = None,
        store: Optional[ResultsStore] = None,
    ):
        self.cfg = cfg.validate()
        self.layout = ArtifactLayout(out_dir)
        self.resume = resume
        self.settings = settings
        self.store = store
        self.digest = cfg.digest()

    # bookkeeping

    def _completed(self, stage: str) -> bool:
        marker = self.layout.marker(stage)
        if not marker.exists():
            return False
        if _read_json(marker).get("config_digest") != self.digest:
            logger.warning(f"Stage {stage} was completed under a different configuration; rerunning")
            return False
        return True

    def _record(self, stage: str, status: str, seconds: float, message: str = ""):
        write_jsonl(self.layout.timings, [{"stage": stage, "status": status, "seconds": seconds}], append=True)
        if self.store is not None:
            try:
                self.store.record_run(
                    str(self.layout.root), stage, status, self.digest, self.cfg.seed, seconds, message
                )
            except Exception as e:
                logger.warning(f"Could not record {stage} in the results store: {e}")

    def _require(self, stage: str, paths: Dict[str, Path]):
        for name, path in paths.items():
            if not _exists(path):
                raise DependencyError(f"stage '{stage}' needs {name} at {path}; run the stage that produces it first")

    def run(self, stages: Optional[Sequence[str]] = None) -> Path:
        stages = list(stages or STAGES)
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}, expected any of {', '.join(STAGES)}")
        self.layout.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.layout.config, self.cfg.to_dict())
        handlers = {
            "gen-data": self.gen_data,
            "augment": self.augment,
            "train-encoders": self.train_encoders,
            "pretrain": self.pretrain,
            "grpo": self.grpo,
            "eval": self.eval,
            "report": self.report,
        }
        for stage in [s for s in STAGES if s in stages]:
            if self.resume and self._completed(stage):
                logger.info(f"Skipping completed stage {stage}")
                self._record(stage, "skipped", 0.0)
                continue
            logger.info(f"Running stage {stage}")
            started = time.perf_counter()
            try:
                outputs = handlers[stage]()
            except Exception as e:
                seconds = time.perf_counter() - started
                logger.error(f"Stage {stage} failed after {seconds:.1f}s: {e}")
                self._record(stage, "failed", seconds, str(e))
                raise PipelineError(stage, e) from e
            seconds = time.perf_counter() - started
            _write_json(
                self.layout.marker(stage),
                {"stage": stage, "config_digest": self.digest, "outputs": sorted(str(p) for p in outputs)},
            )
            self._record(stage, "ok", seconds)
            logger.info(f"Stage {stage} done in {seconds:.1f}s")
        return self.layout.root

    # loaders

    def _encoders(self, stage: str) -> Tuple[ClassifierModel, DualEncoder]:
        self._require(stage, {"classifier": self.layout.classifier, "dual encoder": self.layout.dual})
        return load_classifier(self.layout.classifier), load_dual(self.layout.dual)

    def _selected_rho(self, stage: str) -> float:
        self._require(stage, {"mixing-ratio selection": self.layout.rho_selection})
        return float(_read_json(self.layout.rho_selection)["rho"])

    # stages

    def gen_data(self) -> List[Path]:
        data = self.cfg.data
        vocab = Vocabulary.load()
        outputs = []
        for split, size in (("train", data.train_size), ("val", data.val_size), ("eval", data.eval_size)):
            records = generate_records(size, self.cfg.seed, data.grammar, data.latent, vocab, split, data.workers)
            meta = {
                "split": split,
                "seed": self.cfg.seed,
                "grammar": data.grammar.to_dict(),
                "latent": data.latent.to_dict(),
                "vocabulary": vocab.to_dict(),
            }
            outputs.append(write_dataset(records, self.layout.dataset(split), meta))
        return outputs

    def augment(self) -> List[Path]:
        self._require("augment", {f"{s} dataset": self.layout.dataset(s) for s in SPLITS})
        aug = self.cfg.augment
        splits = {s: read_dataset(self.layout.dataset(s)) for s in SPLITS}
        vocab = Vocabulary.from_dict(read_dataset_meta(self.layout.dataset("train"))["vocabulary"])
        rulesets = {rs.ruleset_id: rs for rs in load_rulesets()}
        if aug.ruleset is not None and aug.ruleset not in rulesets:
            raise ConfigError(f"unknown rule set '{aug.ruleset}', available: {sorted(rulesets)}")
        if any(kind != "rule" for kind in aug.rewriter_kinds) and self.settings is None:
            raise ConfigError("non-rule rewriters need process settings (endpoint, command or provider keys)")
        clients = {kind: build_rewriter(kind, self.settings) for kind in aug.rewriter_kinds}
        try:
            candidates = [rulesets[aug.ruleset]] if aug.ruleset else list(rulesets.values())
            subset = [(r.scene, r.original) for r in splits["train"][: aug.selection_subset]]
            ruleset_id, client_name, scores = select_configuration(candidates, clients, subset, FidelityScorer(vocab))
            ruleset, client = rulesets[ruleset_id], clients[client_name]
            logger.info(f"Selected rule set {ruleset_id} with rewriter {client_name}")
            selection = {
                "ruleset": ruleset_id,
                "rewriter": client_name,
                "rewriter_info": describe_rewriter(client),
                "scores": {f"{rs}|{name}": score for (rs, name), score in sorted(scores.items())},
            }
            outputs = [_write_json(self.layout.selection, selection)]
            for split, records in splits.items():
                enriched = augment_records(records, ruleset, client, vocab, self.cfg.data.workers, aug.retries)
                meta = dict(read_dataset_meta(self.layout.dataset(split)), ruleset=ruleset_id, rewriter=client_name)
                meta.pop("count", None)
                outputs.append(write_dataset(enriched, self.layout.augmented(split), meta))
            return outputs
        finally:
            for c in clients.values():
                c.close()

    def train_encoders(self) -> List[Path]:
        self._require("train-encoders", {"augmented train split": self.layout.augmented("train")})
        train = read_dataset(self.layout.augmented("train"))
        vocab = Vocabulary.from_dict(read_dataset_meta(self.layout.augmented("train"))["vocabulary"])
        classifier, clf_log = train_classifier(train, self.cfg.classifier, self.cfg.seed)
        dual, dual_log = train_dual(train, self.cfg.dual, self.cfg.seed, vocab.size)
        ref_stats = fit_ref_stats(train, classifier)
        write_jsonl(self.layout.encoder_log, clf_log.entries + dual_log.entries)
        return [
            save_classifier(self.layout.classifier, classifier, self.cfg.classifier),
            save_dual(self.layout.dual, dual, self.cfg.dual),
            save_ref_stats(self.layout.ref_stats, ref_stats),
            self.layout.encoder_log,
        ]

    def pretrain(self) -> List[Path]:
        _, dual = self._encoders("pretrain")
        self._require(
            "pretrain", {"augmented train split": self.layout.augmented("train"), "augmented val split": self.layout.augmented("val")}
        )
        train = read_dataset(self.layout.augmented("train"))
        aug = self.cfg.augment
        if aug.auto_select_rho:
            val = read_dataset(self.layout.augmented("val"))
            rho, probes, nets = select_ratio(aug.rho_scan, train, val, dual, self.cfg, self.layout)
        else:
            rho, probes, nets = aug.rho, {}, {}
        for ratio in sorted({0.0, rho}):
            if ratio not in nets:
                nets[ratio] = pretrain_ratio(
                    ratio, train, dual, self.cfg, self.layout.pretrain(ratio), self.layout.pretrain_log(ratio)
                )
        selection = {"rho": rho, "auto_selected": aug.auto_select_rho, "val_clap": {f"{r:.2f}": v for r, v in probes.items()}}
        _write_json(self.layout.rho_selection, selection)
        return [self.layout.rho_selection] + [self.layout.pretrain(r).with_suffix(".json") for r in sorted(nets)]

    def _reward_config(self, variant: str) -> RewardConfig:
        base = self.cfg.reward
        if variant == WEIGHTED_VARIANT:
            return base
        return RewardConfig.variant(variant, standardize=base.standardize, fad_mode=base.fad_mode, eps=base.eps)

    def grpo(self) -> List[Path]:
        classifier, dual = self._encoders("grpo")
        self._require("grpo", {"reference statistics": self.layout.ref_stats})
        rho = self._selected_rho("grpo")
        self._require("grpo", {"pretrained flow": self.layout.pretrain(rho)})
        ref_stats = load_ref_stats(self.layout.ref_stats)
        prompts = read_dataset(self.layout.augmented("train"))
        val = read_dataset(self.layout.augmented("val"))
        outputs = []
        for variant in self.cfg.reward_variants:
            out_dir = self.layout.grpo_dir(variant)
            final = self.layout.grpo_final(variant)
            if self.resume and _exists(final):
                logger.info(f"GRPO variant {variant} already finished; keeping {final}")
                outputs.append(final.with_suffix(".json"))
                continue
            if not self.resume:
                for name in (TRAIN_LOG_NAME, REWARD_LOG_NAME):
                    (out_dir / name).unlink(missing_ok=True)
            reward_model = RewardModel(dual, classifier, ref_stats, self._reward_config(variant))
            result = train_grpo(
                load_velocity_net(self.layout.pretrain(rho)),
                load_velocity_net(self.layout.pretrain(rho)),
                prompts,
                dual,
                reward_model,
                self.cfg.flow,
                self.cfg.grpo,
                self.cfg.seed,
                out_dir=out_dir,
                resume=self.resume,
                config_digest=self.digest,
                eval_prompts=val,
            )
            _write_json(out_dir / "probes.json", {str(k): v for k, v in sorted(result.probes.items())})
            outputs.append(
                save_velocity_net(final, result.policy, extra={"variant": variant, "rho": rho, "reward": asdict(reward_model.cfg)})
            )
        return outputs

    def _models(self) -> Dict[str, Path]:
        rho = self._selected_rho("eval")
        models = {BASELINE_ID: self.layout.pretrain(0.0), DATAAUG_ID: self.layout.pretrain(rho)}
        for variant in self.cfg.reward_variants:
            models[grpo_model_id(variant)] = self.layout.grpo_final(variant)
        return models

    def eval(self) -> List[Path]:
        classifier, dual = self._encoders("eval")
        models = self._models()
        self._require("eval", {model_id: path for model_id, path in models.items()})
        testset = read_dataset(self.layout.augmented("eval"))
        train_ids = [r.record_id for split in ("train", "val") for r in read_dataset(self.layout.augmented(split))]
        outputs = []
        for model_id, path in models.items():
            generator = FlowGenerator(load_velocity_net(path), dual, self.cfg.flow, self.cfg.seed, model_id)
            report = evaluate(
                generator,
                testset,
                dual,
                classifier,
                self.cfg.eval.n_boot,
                self.cfg.seed,
                train_ids,
                model_id,
                self.digest,
                self.cfg.eval.prompt_source,
            )
            outputs.append(report.save(self.layout.report(model_id)))
            if self.store is not None:
                self.store.save_report(str(self.layout.root), report.to_dict(), self.cfg.seed, report.wall_time)
        return outputs

    def reports(self) -> Dict[str, EvalReport]:
        eval_dir = self.layout.root / "eval"
        if not eval_dir.exists():
            raise DependencyError(f"no eval reports under {eval_dir}; run the eval stage first")
        return {p.stem: EvalReport.load(p) for p in sorted(eval_dir.glob("*.json"))}

    def report(self) -> List[Path]:
        reports = self.reports()
        summary_ids = [DATAAUG_ID] + [grpo_model_id(v) for v in self.cfg.reward_variants]
        missing = [m for m in summary_ids if m not in reports]
        if missing:
            raise DependencyError(f"missing eval reports for {missing}")
        excel = self.cfg.eval.excel
        paths = compare_table([reports[m] for m in summary_ids], self.layout.summary_stem, excel)
        outputs = list(paths.values())
        augmentation_ids = [m for m in (BASELINE_ID, DATAAUG_ID, grpo_model_id(WEIGHTED_VARIANT)) if m in reports]
        if len(augmentation_ids) >= 2:
            outputs += list(compare_table([reports[m] for m in augmentation_ids], self.layout.augmentation_stem, excel).values())
        return outputs


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir: os.PathLike,
    resume: bool = False,
    stages: Optional[Sequence[str]] = None,
    settings: Any = None,
    store: Optional[ResultsStore] = None,
) -> Path:
    return Pipeline(cfg, out_dir, resume=resume, settings=settings, store=store).run(stages)


# multi-seed directional check


def _relative_change(new: float, base: float, direction: str) -> float:
    """Positive when ``new`` is worse than ``base``."""
    scale = abs(base) if base != 0 else 1.0
    return (new - base) / scale if direction == "lower" else (base - new) / scale


def directional_summary(per_seed: Sequence[Dict[str, EvalReport]], tolerance: float = 0.05) -> pd.DataFrame:
    """Count, across seeds, how often each qualitative claim about the reward variants holds."""
    n = len(per_seed)
    if n == 0:
        raise DataError("no seeds to summarize")
    strong, weaker = math.ceil(0.8 * n), math.ceil(0.6 * n)
    direction = {key: d for _, key, d in METRICS}

    def improves(reports, model_id, key) -> bool:
        base = reports[DATAAUG_ID].metric(key)[0]
        value = reports[model_id].metric(key)[0]
        return value < base if direction[key] == "lower" else value > base

    def clap_best_single(reports) -> bool:
        singles = [grpo_model_id(v) for v in ("clap", "kl", "fad") if grpo_model_id(v) in reports]
        return max(singles, key=lambda m: (reports[m].clap_mean, m == grpo_model_id("clap"))) == grpo_model_id("clap")

    def weighted_safe(reports) -> bool:
        base, wt = reports[DATAAUG_ID], reports[grpo_model_id(WEIGHTED_VARIANT)]
        return all(_relative_change(wt.metric(k)[0], base.metric(k)[0], direction[k]) <= tolerance for _, k, _ in METRICS)

    claims = [
        ("CLAP-only GRPO improves CLAP_dual", strong, [grpo_model_id("clap")], lambda r: improves(r, grpo_model_id("clap"), "clap")),
        ("CLAP-only has the best CLAP_dual among single rewards", weaker, [grpo_model_id(v) for v in ("clap", "kl", "fad")], clap_best_single),
        ("KL-only GRPO improves KL_cls", strong, [grpo_model_id("kl")], lambda r: improves(r, grpo_model_id("kl"), "kl")),
        ("FAD-only GRPO improves FD_emb", strong, [grpo_model_id("fad")], lambda r: improves(r, grpo_model_id("fad"), "fd")),
        (f"weighted GRPO degrades no metric by more than {tolerance:.0%}", strong, [grpo_model_id(WEIGHTED_VARIANT)], weighted_safe),
        ("caption mixing beats rho=0 on CLAP_dual", strong, [BASELINE_ID], lambda r: r[DATAAUG_ID].clap_mean > r[BASELINE_ID].clap_mean),
    ]
    rows = []
    for claim, needed, required, check in claims:
        usable = [r for r in per_seed if DATAAUG_ID in r and all(m in r for m in required)]
        held = sum(bool(check(r)) for r in usable)
        rows.append(
            {"claim": claim, "held": held, "seeds": len(usable), "needed": needed, "passed": len(usable) == n and held >= needed}
        )
    return pd.DataFrame(rows)


def sweep(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    out_root: os.PathLike,
    resume: bool = False,
    settings: Any = None,
    store: Optional[ResultsStore] = None,
) -> pd.DataFrame:
    """Full pipeline per seed, then the directional summary written next to the seed directories."""
    root = Path(out_root)
    per_seed = []
    for seed in seeds:
        seed_cfg = cfg.with_overrides(seed=seed)
        pipeline = Pipeline(seed_cfg, root / f"seed_{seed}", resume=resume, settings=settings, store=store)
        pipeline.run()
        per_seed.append(pipeline.reports())
    summary = directional_summary(per_seed)
    root.mkdir(parents=True, exist_ok=True)
    summary.to_csv(root / "directional_summary.csv", index=False, lineterminator="\n")
    with open(root / "directional_summary.txt", "w", encoding="utf-8") as f:
        f.write(summary.to_string(index=False) + "\n")
    passed = int(summary["passed"].sum())
    logger.info(f"Directional check over {len(seeds)} seeds: {passed}/{len(summary)} claims hold")
    return summary


def exit_code(exc: BaseException) -> int:
    return getattr(exc, "exit_code", 1) if isinstance(exc, LabError) else 1
