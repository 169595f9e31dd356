"""
Frozen evaluation and reward encoders: the event classifier (class
probabilities and embedding-distance features), the contrastive text/audio
dual encoder, and reference Gaussian statistics over classifier embeddings
"""

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.checkpoints import load_checkpoint, save_checkpoint
from backend.errors import ConfigError, ContentError, DataError, NumericError, ShapeError, TrainingError
from backend.synthworld import CLASS_ORDER, Caption, DatasetRecord, EventScene, latent_matrix
from backend.tensorkit import (
    MlpParams,
    RngStream,
    adamw_init,
    adamw_step,
    as_batch,
    clip_grad_norm,
    cosine_lr,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = len(CLASS_ORDER)
REF_EPS = 1e-6
GLOBAL_BUCKET = "global"


@dataclass
class LatentScaler:
    """Per-feature standardization applied before every encoder and the flow"""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray, floor: float = 1e-3) -> "LatentScaler":
        x = as_batch(latents)
        return cls(mean=x.mean(axis=0), scale=np.maximum(x.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "LatentScaler":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def transform(self, latents: np.ndarray) -> np.ndarray:
        x = as_batch(latents)
        if x.shape[1] != self.dim:
            raise ShapeError(f"latent width {x.shape[1]} != {self.dim}")
        return (x - self.mean) / self.scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return as_batch(z) * self.scale + self.mean

    def named_tensors(self, prefix: str = "scaler.") -> Dict[str, np.ndarray]:
        return {f"{prefix}mean": self.mean, f"{prefix}scale": self.scale}

    @classmethod
    def from_named(cls, named: Dict[str, np.ndarray], prefix: str = "scaler.") -> "LatentScaler":
        return cls(mean=np.array(named[f"{prefix}mean"]), scale=np.array(named[f"{prefix}scale"]))


@dataclass
class ClassifierHyper:
    hidden: Tuple[int, ...] = (32, 16)
    epochs: int = 25
    batch_size: int = 64
    lr_max: float = 3e-3
    lr_min: float = 5e-6
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    holdout_fraction: float = 0.1
    min_records: int = 2000
    shuffle_labels: bool = False

    def validate(self):
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"invalid classifier hidden widths {self.hidden}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("classifier epochs and batch size must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(f"holdout fraction {self.holdout_fraction} outside (0, 1)")


@dataclass
class DualHyper:
    embed_dim: int = 16
    text_hidden: int = 64
    audio_hidden: int = 64
    temperature: float = 0.07
    epochs: int = 40
    batch_size: int = 64
    lr_max: float = 3e-3
    lr_min: float = 5e-6
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    holdout_fraction: float = 0.1
    enriched_prob: float = 0.5
    candidates: int = 32

    def validate(self):
        if self.batch_size < 8:
            raise ConfigError(f"dual encoder batch size must be at least 8, got {self.batch_size}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.embed_dim < 1 or self.epochs < 1:
            raise ConfigError("dual encoder embed_dim and epochs must be positive")
        if not 0 <= self.enriched_prob <= 1:
            raise ConfigError(f"enriched_prob {self.enriched_prob} outside [0, 1]")


@dataclass
class ClassifierModel:
    params: MlpParams
    scaler: LatentScaler
    classes: Tuple[str, ...] = tuple(c.value for c in CLASS_ORDER)

    @property
    def embed_dim(self) -> int:
        return self.params.dims[-2]

    @property
    def latent_dim(self) -> int:
        return self.params.dims[0]

    def digest(self) -> str:
        h = hashlib.sha256(self.params.digest().encode("ascii"))
        h.update(np.ascontiguousarray(np.concatenate([self.scaler.mean, self.scaler.scale]), dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class DualEncoder:
    text: MlpParams
    audio: MlpParams
    scaler: LatentScaler
    temperature: float = 0.07

    @property
    def vocab_size(self) -> int:
        return self.text.dims[0]

    @property
    def embed_dim(self) -> int:
        return self.text.dims[-1]

    def digest(self) -> str:
        h = hashlib.sha256(self.text.digest().encode("ascii"))
        h.update(self.audio.digest().encode("ascii"))
        h.update(np.ascontiguousarray(np.concatenate([self.scaler.mean, self.scaler.scale]), dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


@dataclass
class RefStats:
    buckets: Dict[str, GaussianStats]
    eps: float = REF_EPS

    @property
    def global_stats(self) -> GaussianStats:
        return self.buckets[GLOBAL_BUCKET]

    def for_scene(self, scene: EventScene) -> GaussianStats:
        return self.buckets.get(bucket_key(scene), self.global_stats)


@dataclass
class TrainingLog:
    entries: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, **entry):
        self.entries.append(entry)

    @property
    def last(self) -> Dict[str, Any]:
        return self.entries[-1] if self.entries else {}


def split_holdout(n: int, fraction: float, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """Random (train, held-out) index split; held-out gets at least one item."""
    perm = rng.permutation(n)
    held = max(1, int(round(n * fraction)))
    return np.sort(perm[held:]), np.sort(perm[:held])


# classifier


def classifier_target(scene: EventScene) -> np.ndarray:
    """Normalized multi-hot of the classes present in the scene."""
    present = set(scene.classes)
    target = np.array([1.0 if c in present else 0.0 for c in CLASS_ORDER])
    if target.sum() == 0:
        raise DataError(f"scene {scene.scene_id} has no events")
    return target / target.sum()


def init_classifier(latent_dim: int, hyper: ClassifierHyper, rng: RngStream, scaler: Optional[LatentScaler] = None) -> ClassifierModel:
    params = init_mlp((latent_dim,) + tuple(hyper.hidden) + (NUM_CLASSES,), rng)
    return ClassifierModel(params=params, scaler=scaler or LatentScaler.identity(latent_dim))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean soft-target cross-entropy and its gradient w.r.t. the logits."""
    batch = logits.shape[0]
    loss = -float(np.sum(targets * log_softmax(logits))) / batch
    return loss, (softmax(logits) - targets) / batch


def classifier_loss(params: MlpParams, x: np.ndarray, targets: np.ndarray) -> Tuple[float, MlpParams]:
    logits, cache = mlp_forward(params, x)
    loss, dlogits = cross_entropy(logits, targets)
    grads, _ = mlp_backward(params, cache, dlogits)
    return loss, grads


def _check_width(model_dim: int, latent: np.ndarray):
    x = as_batch(latent)
    if x.shape[1] != model_dim:
        raise ShapeError(f"latent width {x.shape[1]} does not match encoder input width {model_dim}")
    return x


def classify(model: ClassifierModel, latent: np.ndarray) -> np.ndarray:
    """Class probabilities for one latent (vector) or a batch (rows)."""
    x = _check_width(model.latent_dim, latent)
    logits, _ = mlp_forward(model.params, model.scaler.transform(x))
    probs = softmax(logits)
    return probs[0] if np.ndim(latent) == 1 else probs


def embed_for_fad(model: ClassifierModel, latent: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations used for embedding-distance statistics."""
    x = _check_width(model.latent_dim, latent)
    _, cache = mlp_forward(model.params, model.scaler.transform(x))
    emb = cache.penultimate
    return emb[0] if np.ndim(latent) == 1 else emb


def _flat_latents(records: Sequence[DatasetRecord]) -> np.ndarray:
    return latent_matrix(records)


def train_classifier(
    records: Sequence[DatasetRecord], hyper: ClassifierHyper, seed: int
) -> Tuple[ClassifierModel, TrainingLog]:
    """Fit the event classifier by cross-entropy to normalized multi-hot targets."""
    hyper.validate()
    if len(records) < hyper.min_records:
        raise DataError(f"classifier needs at least {hyper.min_records} records, got {len(records)}")
    rng = RngStream(seed, "classifier")
    raw = _flat_latents(records)
    targets = np.stack([classifier_target(r.scene) for r in records])
    train_idx, held_idx = split_holdout(len(records), hyper.holdout_fraction, rng.spawn("split"))
    scaler = LatentScaler.fit(raw[train_idx])
    x = scaler.transform(raw)
    y = targets.copy()
    if hyper.shuffle_labels:
        y[train_idx] = targets[train_idx][rng.spawn("shuffle").permutation(len(train_idx))]

    model = init_classifier(raw.shape[1], hyper, rng.spawn("init"), scaler)
    params = model.params
    opt = adamw_init(params, weight_decay=hyper.weight_decay)
    log = TrainingLog()

    def held_out_ce(p: MlpParams) -> float:
        logits, _ = mlp_forward(p, x[held_idx])
        return cross_entropy(logits, targets[held_idx])[0]

    baseline = held_out_ce(params)
    batches = max(1, math.ceil(len(train_idx) / hyper.batch_size))
    total = hyper.epochs * batches
    batch_rng = rng.spawn("batches")
    step = 0
    for epoch in range(hyper.epochs):
        order = train_idx[batch_rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for b in range(batches):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            loss, grads = classifier_loss(params, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"classifier loss diverged at step {step}")
            grads, _ = clip_grad_norm(grads, hyper.grad_clip)
            params, opt = adamw_step(opt, params, grads, cosine_lr(step, total, hyper.lr_max, hyper.lr_min))
            epoch_loss += loss
            step += 1
        held = held_out_ce(params)
        log.add(stage="classifier", epoch=epoch, train_loss=epoch_loss / batches, held_out_loss=held, baseline=baseline)

    model = ClassifierModel(params=params, scaler=scaler)
    final = log.last["held_out_loss"]
    if final >= baseline:
        message = f"classifier held-out loss {final:.4f} did not beat the untrained {baseline:.4f}"
        if not hyper.shuffle_labels:
            raise TrainingError(message)
        logger.warning(f"Shuffled-label control: {message}")
    log.add(stage="classifier", held_out_accuracy=classifier_accuracy(model, [records[i] for i in held_idx]))
    logger.info(f"Trained classifier: held-out CE {final:.4f} (untrained {baseline:.4f}), digest {model.digest()[:12]}")
    return model, log


def classifier_accuracy(model: ClassifierModel, records: Sequence[DatasetRecord]) -> float:
    """Fraction of records whose argmax class is present in the scene."""
    if not records:
        return 0.0
    probs = classify(model, _flat_latents(records))
    hits = [CLASS_ORDER[int(np.argmax(p))] in set(r.scene.classes) for p, r in zip(probs, records)]
    return float(np.mean(hits))


# dual encoder


def bag_of_tokens(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    """Mean one-hot of a token list."""
    if len(tokens) == 0:
        raise ContentError("caption has no tokens")
    bag = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=vocab_size).astype(np.float64)
    if bag.shape[0] != vocab_size:
        raise ShapeError(f"token id {int(np.max(tokens))} outside a vocabulary of {vocab_size}")
    return bag / len(tokens)


def l2_normalize(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cannot normalize a zero embedding")
    return z / norms, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms


def init_dual(vocab_size: int, latent_dim: int, hyper: DualHyper, rng: RngStream, scaler: Optional[LatentScaler] = None) -> DualEncoder:
    return DualEncoder(
        text=init_mlp((vocab_size, hyper.text_hidden, hyper.embed_dim), rng.spawn("text")),
        audio=init_mlp((latent_dim, hyper.audio_hidden, hyper.embed_dim), rng.spawn("audio")),
        scaler=scaler or LatentScaler.identity(latent_dim),
        temperature=hyper.temperature,
    )


def _text_bags(dual: DualEncoder, captions: Sequence[Caption]) -> np.ndarray:
    return np.stack([bag_of_tokens(c.tokens, dual.vocab_size) for c in captions])


def embed_text(dual: DualEncoder, caption: Caption) -> np.ndarray:
    return embed_texts(dual, [caption])[0]


def embed_texts(dual: DualEncoder, captions: Sequence[Caption]) -> np.ndarray:
    z, _ = mlp_forward(dual.text, _text_bags(dual, captions))
    return l2_normalize(z)[0]


def embed_audio(dual: DualEncoder, latent: np.ndarray) -> np.ndarray:
    return embed_audios(dual, np.ravel(latent))[0]


def embed_audios(dual: DualEncoder, latents: np.ndarray) -> np.ndarray:
    x = _check_width(dual.audio.dims[0], latents)
    z, _ = mlp_forward(dual.audio, dual.scaler.transform(x))
    return l2_normalize(z)[0]


def info_nce(
    text_emb: np.ndarray, audio_emb: np.ndarray, temperature: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Symmetric in-batch contrastive loss; returns (loss, dL/dtext, dL/daudio)."""
    if text_emb.shape != audio_emb.shape:
        raise ShapeError(f"text {text_emb.shape} and audio {audio_emb.shape} embeddings differ")
    batch = text_emb.shape[0]
    sims = text_emb @ audio_emb.T / temperature
    eye = np.eye(batch)
    loss_rows = -float(np.trace(log_softmax(sims))) / batch
    loss_cols = -float(np.trace(log_softmax(sims.T))) / batch
    d_sims = 0.5 * ((softmax(sims) - eye) + (softmax(sims.T).T - eye)) / batch
    d_text = d_sims @ audio_emb / temperature
    d_audio = d_sims.T @ text_emb / temperature
    return 0.5 * (loss_rows + loss_cols), d_text, d_audio


def dual_loss(
    text: MlpParams, audio: MlpParams, bags: np.ndarray, latents: np.ndarray, temperature: float
) -> Tuple[float, MlpParams, MlpParams]:
    """Contrastive loss and gradients for both branches; ``latents`` are already standardized."""
    zt, cache_t = mlp_forward(text, bags)
    za, cache_a = mlp_forward(audio, latents)
    yt, nt = l2_normalize(zt)
    ya, na = l2_normalize(za)
    loss, dyt, dya = info_nce(yt, ya, temperature)
    grads_t, _ = mlp_backward(text, cache_t, l2_normalize_backward(yt, nt, dyt))
    grads_a, _ = mlp_backward(audio, cache_a, l2_normalize_backward(ya, na, dya))
    return loss, grads_t, grads_a


def retrieval_accuracy(
    dual: DualEncoder, records: Sequence[DatasetRecord], candidates: int = 32, source: str = "enriched"
) -> float:
    """Top-1 caption-to-audio retrieval within consecutive blocks of ``candidates`` records."""
    blocks = len(records) // candidates
    if blocks == 0:
        raise DataError(f"retrieval needs at least {candidates} records, got {len(records)}")
    hits = 0
    for b in range(blocks):
        block = records[b * candidates : (b + 1) * candidates]
        text = embed_texts(dual, [r.caption(source) for r in block])
        audio = embed_audios(dual, _flat_latents(block))
        hits += int(np.sum(np.argmax(text @ audio.T, axis=1) == np.arange(candidates)))
    return hits / (blocks * candidates)


def train_dual(
    records: Sequence[DatasetRecord], hyper: DualHyper, seed: int, vocab_size: int
) -> Tuple[DualEncoder, TrainingLog]:
    """Contrastive training of both branches; each record contributes one of its caption forms per epoch."""
    hyper.validate()
    if len(records) < hyper.batch_size:
        raise DataError(f"dual encoder needs at least {hyper.batch_size} records, got {len(records)}")
    rng = RngStream(seed, "dual")
    raw = _flat_latents(records)
    train_idx, held_idx = split_holdout(len(records), hyper.holdout_fraction, rng.spawn("split"))
    scaler = LatentScaler.fit(raw[train_idx])
    x = scaler.transform(raw)
    dual = init_dual(vocab_size, raw.shape[1], hyper, rng.spawn("init"), scaler)
    text, audio = dual.text, dual.audio
    opt_t = adamw_init(text, weight_decay=hyper.weight_decay)
    opt_a = adamw_init(audio, weight_decay=hyper.weight_decay)
    held = [records[i] for i in held_idx]
    candidates = min(hyper.candidates, len(held))
    log = TrainingLog()

    batches = len(train_idx) // hyper.batch_size
    total = hyper.epochs * batches
    batch_rng = rng.spawn("batches")
    caption_rng = rng.spawn("captions")
    step = 0
    for epoch in range(hyper.epochs):
        order = train_idx[batch_rng.permutation(len(train_idx))]
        draws = caption_rng.random(len(order))
        bags = np.stack(
            [
                bag_of_tokens(
                    records[i].caption("enriched" if u < hyper.enriched_prob else "original").tokens, vocab_size
                )
                for i, u in zip(order, draws)
            ]
        )
        epoch_loss = 0.0
        for b in range(batches):
            sl = slice(b * hyper.batch_size, (b + 1) * hyper.batch_size)
            loss, gt, ga = dual_loss(text, audio, bags[sl], x[order[sl]], hyper.temperature)
            if not math.isfinite(loss):
                raise TrainingError(f"dual encoder loss diverged at step {step}")
            gt, _ = clip_grad_norm(gt, hyper.grad_clip)
            ga, _ = clip_grad_norm(ga, hyper.grad_clip)
            lr = cosine_lr(step, total, hyper.lr_max, hyper.lr_min)
            text, opt_t = adamw_step(opt_t, text, gt, lr)
            audio, opt_a = adamw_step(opt_a, audio, ga, lr)
            epoch_loss += loss
            step += 1
        log.add(stage="dual", epoch=epoch, train_loss=epoch_loss / max(batches, 1))

    dual = DualEncoder(text=text, audio=audio, scaler=scaler, temperature=hyper.temperature)
    accuracy = retrieval_accuracy(dual, held, candidates) if candidates >= 2 else float("nan")
    log.add(stage="dual", held_out_retrieval=accuracy, candidates=candidates)
    logger.info(f"Trained dual encoder: held-out top-1 retrieval {accuracy:.3f} over {candidates}")
    return dual, log


# reference statistics


def bucket_key(scene: EventScene) -> str:
    return "+".join(sorted({c.value for c in scene.classes}))


def fit_gaussian(embeddings: np.ndarray, eps: float = REF_EPS) -> GaussianStats:
    """Sample mean and unbiased covariance plus eps * I."""
    e = as_batch(embeddings)
    n, dim = e.shape
    if n < 2:
        raise DataError(f"need at least 2 embeddings for a covariance, got {n}")
    mean = e.mean(axis=0)
    centered = e - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(dim)
    return GaussianStats(mean=mean, cov=cov, n=n)


def fit_ref_stats(
    records: Sequence[DatasetRecord], classifier: ClassifierModel, eps: float = REF_EPS
) -> RefStats:
    """Global and per-condition-bucket Gaussians of classifier embeddings."""
    emb = embed_for_fad(classifier, _flat_latents(records))
    need = classifier.embed_dim + 1
    keys = [bucket_key(r.scene) for r in records]
    groups: Dict[str, List[int]] = {GLOBAL_BUCKET: list(range(len(records)))}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    buckets = {}
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) < need:
            raise DataError(f"reference bucket '{key}' has {len(idx)} samples, needs at least {need}")
        buckets[key] = fit_gaussian(emb[idx], eps)
    logger.info(f"Fitted reference statistics for {len(buckets)} buckets")
    return RefStats(buckets=buckets, eps=eps)


# persistence


def save_classifier(path: os.PathLike, model: ClassifierModel, hyper: Optional[ClassifierHyper] = None):
    tensors = model.params.named_tensors("classifier.")
    tensors.update(model.scaler.named_tensors())
    return save_checkpoint(
        path, "classifier", tensors, asdict(hyper) if hyper else {}, {"classes": list(model.classes), "digest": model.digest()}
    )


def load_classifier(path: os.PathLike) -> ClassifierModel:
    ckpt = load_checkpoint(path, "classifier")
    return ClassifierModel(
        params=MlpParams.from_named(ckpt.tensors, "classifier."),
        scaler=LatentScaler.from_named(ckpt.tensors),
        classes=tuple(ckpt.extra.get("classes", [c.value for c in CLASS_ORDER])),
    )


def save_dual(path: os.PathLike, dual: DualEncoder, hyper: Optional[DualHyper] = None):
    tensors = dual.text.named_tensors("text.")
    tensors.update(dual.audio.named_tensors("audio."))
    tensors.update(dual.scaler.named_tensors())
    return save_checkpoint(
        path, "dual", tensors, asdict(hyper) if hyper else {}, {"temperature": dual.temperature, "digest": dual.digest()}
    )


def load_dual(path: os.PathLike) -> DualEncoder:
    ckpt = load_checkpoint(path, "dual")
    return DualEncoder(
        text=MlpParams.from_named(ckpt.tensors, "text."),
        audio=MlpParams.from_named(ckpt.tensors, "audio."),
        scaler=LatentScaler.from_named(ckpt.tensors),
        temperature=float(ckpt.extra["temperature"]),
    )


def save_ref_stats(path: os.PathLike, stats: RefStats):
    tensors = {}
    counts = {}
    for key, g in stats.buckets.items():
        tensors[f"ref.{key}.mean"] = g.mean
        tensors[f"ref.{key}.cov"] = g.cov
        counts[key] = g.n
    return save_checkpoint(path, "ref_stats", tensors, {"eps": stats.eps}, {"counts": counts})


def load_ref_stats(path: os.PathLike) -> RefStats:
    ckpt = load_checkpoint(path, "ref_stats")
    buckets = {
        key: GaussianStats(mean=ckpt.tensors[f"ref.{key}.mean"], cov=ckpt.tensors[f"ref.{key}.cov"], n=int(n))
        for key, n in ckpt.extra["counts"].items()
    }
    return RefStats(buckets=buckets, eps=float(ckpt.hyper.get("eps", REF_EPS)))
