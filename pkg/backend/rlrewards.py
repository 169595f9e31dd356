"""
Per-sample rewards for policy tuning: text/audio alignment, semantic KL,
leave-one-out embedding-distance credit, and their weighted composite
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from backend.checkpoints import write_jsonl
from backend.encoders import (
    REF_EPS,
    ClassifierModel,
    DualEncoder,
    GaussianStats,
    RefStats,
    classify,
    embed_audios,
    embed_for_fad,
    embed_text,
    fit_gaussian,
)
from backend.errors import ConfigError, DataError, DomainError
from backend.synthworld import Caption, EventScene
from backend.tensorkit import as_batch

logger = logging.getLogger(__name__)

REWARD_VARIANTS = ("clap", "fad", "kl", "wt")
FAD_MODES = ("auto", "loo", "mahalanobis")
KL_FLOOR = 1e-10
SIMPLEX_TOL = 1e-6
SYMMETRY_TOL = 1e-9
TERMS = ("r_clap", "r_kl", "r_fad")


@dataclass
class RewardConfig:
    w_clap: float = 1.0
    w_kl: float = 1.0
    w_fad: float = 1.0
    standardize: bool = True
    fad_mode: str = "auto"
    eps: float = 1e-8

    def __post_init__(self):
        weights = (self.w_clap, self.w_kl, self.w_fad)
        if not all(math.isfinite(w) for w in weights):
            raise ConfigError(f"reward weights must be finite, got {weights}")
        if not any(w != 0 for w in weights):
            raise ConfigError("at least one reward weight must be nonzero")
        if self.fad_mode not in FAD_MODES:
            raise ConfigError(f"fad_mode must be one of {FAD_MODES}, got {self.fad_mode!r}")

    @property
    def weights(self) -> Dict[str, float]:
        return {"r_clap": self.w_clap, "r_kl": self.w_kl, "r_fad": self.w_fad}

    @classmethod
    def variant(cls, name: str, **overrides) -> "RewardConfig":
        presets = {
            "clap": dict(w_clap=1.0, w_kl=0.0, w_fad=0.0),
            "kl": dict(w_clap=0.0, w_kl=1.0, w_fad=0.0),
            "fad": dict(w_clap=0.0, w_kl=0.0, w_fad=1.0),
            "wt": dict(w_clap=1.0, w_kl=1.0, w_fad=1.0),
        }
        if name not in presets:
            raise ConfigError(f"unknown reward variant '{name}', expected one of {', '.join(REWARD_VARIANTS)}")
        return cls(**{**presets[name], **overrides})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class RewardBreakdown:
    sample_id: str
    r_clap: Optional[float] = None
    r_kl: Optional[float] = None
    r_fad: Optional[float] = None
    total: float = float("nan")

    def term(self, name: str) -> float:
        value = getattr(self, name)
        if value is None or not math.isfinite(value):
            raise DataError(f"sample {self.sample_id}: reward term {name} is missing")
        return float(value)

    def to_dict(self) -> dict:
        return asdict(self)


def clap_reward(dual: DualEncoder, caption: Caption, latent: np.ndarray) -> float:
    """Cosine of the caption and audio embeddings."""
    return clap_rewards(dual, caption, np.ravel(latent)[None, :])[0]


def clap_rewards(dual: DualEncoder, caption: Caption, latents: np.ndarray) -> np.ndarray:
    text = embed_text(dual, caption)
    audio = embed_audios(dual, latents)
    return np.clip(audio @ text, -1.0, 1.0)


def _check_simplex(name: str, p: np.ndarray):
    if p.ndim != 1 or p.size == 0:
        raise DomainError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(float(p.sum()) - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"{name} is not a probability distribution")


def kl_div(p, q) -> float:
    """KL(p || q) in nats; q is floored at 1e-10 and renormalized."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_simplex("p", p)
    _check_simplex("q", q)
    if p.shape != q.shape:
        raise DomainError(f"distribution sizes differ: {p.shape} vs {q.shape}")
    q = np.maximum(q, KL_FLOOR)
    q = q / q.sum()
    support = p > 0
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def kl_reward(classifier: ClassifierModel, gen_latent: np.ndarray, ref_latent: Optional[np.ndarray]) -> float:
    """Negated KL from the reference clip's class distribution to the generated one's."""
    if ref_latent is None:
        raise DataError("generated latent has no paired reference")
    return -kl_div(classify(classifier, np.ravel(ref_latent)), classify(classifier, np.ravel(gen_latent)))


def kl_rewards(classifier: ClassifierModel, gen_latents: np.ndarray, ref_latent: np.ndarray) -> np.ndarray:
    ref = classify(classifier, np.ravel(ref_latent))
    return np.array([-kl_div(ref, q) for q in classify(classifier, as_batch(gen_latents))])


def _symmetric(name: str, cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1]:
        raise DomainError(f"{name} is not square: {cov.shape}")
    if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (cov + cov.T)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(cov)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet(mu1, sigma1, mu2, sigma2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1 = _symmetric("sigma1", sigma1)
    s2 = _symmetric("sigma2", sigma2)
    if not (mu1.shape == mu2.shape and s1.shape == s2.shape == (mu1.size, mu1.size)):
        raise DomainError(f"mismatched Gaussian shapes {mu1.shape}, {s1.shape}, {mu2.shape}, {s2.shape}")
    root1 = _psd_sqrt(s1)
    middle = root1 @ s2 @ root1
    eig = linalg.eigvalsh(0.5 * (middle + middle.T))
    diff = mu1 - mu2
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sum(np.sqrt(np.maximum(eig, 0.0))))
    return max(d2, 0.0)


def frechet_stats(a: GaussianStats, b: GaussianStats) -> float:
    return frechet(a.mean, a.cov, b.mean, b.cov)


def fad_group_reward(embeddings: np.ndarray, ref: GaussianStats, eps: float = REF_EPS) -> np.ndarray:
    """Leave-one-out credit: distance without sample i minus distance with the whole group."""
    e = as_batch(embeddings)
    group, dim = e.shape
    if group < dim + 2:
        raise ConfigError(
            f"leave-one-out FAD needs a group of at least {dim + 2} for {dim}-d embeddings, got {group}; "
            f"use fad_mode='mahalanobis' for small groups"
        )
    full = frechet_stats(fit_gaussian(e, eps), ref)
    keep = np.ones(group, dtype=bool)
    out = np.empty(group)
    for i in range(group):
        keep[i] = False
        out[i] = frechet_stats(fit_gaussian(e[keep], eps), ref) - full
        keep[i] = True
    return out


def mahalanobis_reward(embeddings: np.ndarray, ref: GaussianStats) -> np.ndarray:
    """Small-group mode: negated squared Mahalanobis distance to the reference Gaussian."""
    e = as_batch(embeddings)
    factor = linalg.cho_factor(ref.cov)
    d = e - ref.mean
    return -np.sum(d * linalg.cho_solve(factor, d.T).T, axis=1)


def fad_rewards(embeddings: np.ndarray, ref: GaussianStats, cfg: RewardConfig, eps: float = REF_EPS) -> np.ndarray:
    e = as_batch(embeddings)
    mode = cfg.fad_mode
    if mode == "auto":
        mode = "loo" if e.shape[0] >= e.shape[1] + 2 else "mahalanobis"
    if mode == "loo":
        return fad_group_reward(e, ref, eps)
    return mahalanobis_reward(e, ref)


def standardize(values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Population z-score within a group."""
    values = np.asarray(values, dtype=np.float64)
    return (values - values.mean()) / (values.std() + eps)


def composite(breakdowns: Sequence[RewardBreakdown], cfg: RewardConfig) -> np.ndarray:
    """Weighted sum of (optionally group-standardized) terms; fills each breakdown's total."""
    if not breakdowns:
        raise DataError("empty reward group")
    totals = np.zeros(len(breakdowns))
    for name, weight in cfg.weights.items():
        values = np.array([b.term(name) for b in breakdowns])
        if cfg.standardize:
            values = standardize(values, cfg.eps)
        totals += weight * values
    for b, total in zip(breakdowns, totals):
        b.total = float(total)
    return totals


@dataclass
class RewardModel:
    """Frozen encoders and reference statistics bundled with a reward configuration"""

    dual: DualEncoder
    classifier: ClassifierModel
    ref_stats: RefStats
    cfg: RewardConfig

    def digests(self) -> Dict[str, str]:
        return {"dual": self.dual.digest(), "classifier": self.classifier.digest()}

    def score_group(
        self,
        caption: Caption,
        scene: EventScene,
        ref_latent: np.ndarray,
        gen_latents: np.ndarray,
        sample_ids: Sequence[str],
    ) -> List[RewardBreakdown]:
        gen = as_batch(gen_latents)
        if len(sample_ids) != gen.shape[0]:
            raise DataError(f"{len(sample_ids)} sample ids for {gen.shape[0]} generated latents")
        try:
            r_clap = clap_rewards(self.dual, caption, gen)
            r_kl = kl_rewards(self.classifier, gen, ref_latent)
            r_fad = fad_rewards(
                embed_for_fad(self.classifier, gen), self.ref_stats.for_scene(scene), self.cfg, self.ref_stats.eps
            )
        except Exception as e:
            logger.error(f"Reward computation failed for {sample_ids[0]}..{sample_ids[-1]}: {e}")
            raise
        breakdowns = [
            RewardBreakdown(sample_id=sid, r_clap=float(c), r_kl=float(k), r_fad=float(f))
            for sid, c, k, f in zip(sample_ids, r_clap, r_kl, r_fad)
        ]
        composite(breakdowns, self.cfg)
        return breakdowns


def write_reward_log(
    path: os.PathLike, breakdowns: Sequence[RewardBreakdown], group_id: str, cfg: RewardConfig, append: bool = True
):
    """One JSON line per sample with every term, the group id and the config digest."""
    digest = cfg.digest()
    rows = [dict(b.to_dict(), group_id=group_id, config_digest=digest) for b in breakdowns]
    return write_jsonl(path, rows, append=append)
