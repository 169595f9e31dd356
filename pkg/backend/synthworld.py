"""
Synthetic audio world: parametric event scenes, waveform rendering, the
spectrogram-style latent encoder, terse base captions and dataset files
"""

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft, signal

from backend.errors import ConfigError, DataError, IntegrityError, ParseError
from backend.tensorkit import RngStream

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DEFAULT_VOCABULARY_PATH = Path(__file__).resolve().parent.parent / "data" / "vocabulary.txt"
MANIFEST_NAME = "manifest.jsonl"
LATENTS_NAME = "latents.bin"
META_NAME = "meta.json"


class EventClass(str, Enum):
    TONE = "tone"
    CHIRP = "chirp"
    NOISE = "noise"


CLASS_ORDER: Tuple[EventClass, ...] = (EventClass.TONE, EventClass.CHIRP, EventClass.NOISE)
CLASS_PHRASES = {EventClass.TONE: "a tone", EventClass.CHIRP: "a chirp", EventClass.NOISE: "noise"}


@dataclass(frozen=True)
class EventSpec:
    event_class: EventClass
    onset: float
    duration: float
    freq: float = 0.0
    freq_end: float = 0.0
    amplitude: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["event_class"] = self.event_class.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EventSpec":
        return cls(
            event_class=EventClass(data["event_class"]),
            onset=float(data["onset"]),
            duration=float(data["duration"]),
            freq=float(data.get("freq", 0.0)),
            freq_end=float(data.get("freq_end", 0.0)),
            amplitude=float(data["amplitude"]),
        )


@dataclass(frozen=True)
class EventScene:
    scene_id: str
    events: Tuple[EventSpec, ...]
    noise_seed: int = 0

    @property
    def classes(self) -> List[EventClass]:
        return [e.event_class for e in self.events]

    def validate(self, sample_rate: int = 8000, clip_seconds: float = 1.0, max_events: int = 3):
        if not 1 <= len(self.events) <= max_events:
            raise DataError(f"scene {self.scene_id}: {len(self.events)} events, allowed 1..{max_events}")
        previous = 0.0
        for i, e in enumerate(self.events):
            if e.onset < 0 or e.duration <= 0 or e.onset + e.duration > clip_seconds + 1e-9:
                raise DataError(f"scene {self.scene_id} event {i}: window outside the clip")
            if e.onset < previous:
                raise DataError(f"scene {self.scene_id}: onsets must be non-decreasing")
            previous = e.onset
            if not 0 < e.amplitude <= 1:
                raise DataError(f"scene {self.scene_id} event {i}: amplitude {e.amplitude}")
            if e.event_class != EventClass.NOISE:
                for f in (e.freq,) + ((e.freq_end,) if e.event_class == EventClass.CHIRP else ()):
                    if not 0 < f < sample_rate / 2:
                        raise DataError(f"scene {self.scene_id} event {i}: frequency {f} Hz")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "noise_seed": self.noise_seed,
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EventScene":
        return cls(
            scene_id=str(data["scene_id"]),
            events=tuple(EventSpec.from_dict(e) for e in data["events"]),
            noise_seed=int(data.get("noise_seed", 0)),
        )


@dataclass
class GrammarConfig:
    """Distribution of synthetic scenes"""

    sample_rate: int = 8000
    clip_seconds: float = 1.0
    max_events: int = 3
    count_weights: Tuple[float, ...] = (0.4, 0.35, 0.25)
    class_weights: Tuple[float, ...] = (1.0, 1.0, 1.0)
    duration_range: Tuple[float, float] = (0.15, 0.45)
    freq_range: Tuple[float, float] = (100.0, 3500.0)
    freq_step: float = 10.0
    # more than two latent band widths at the default 8 bands x 8 frames
    chirp_min_sweep: float = 1100.0
    amplitude_range: Tuple[float, float] = (0.2, 0.9)

    def validate(self):
        lo, hi = self.duration_range
        if self.sample_rate <= 0 or self.clip_seconds <= 0:
            raise ConfigError("sample_rate and clip_seconds must be positive")
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid duration range {self.duration_range}")
        if lo > self.clip_seconds:
            raise ConfigError(
                f"minimum event duration {lo}s exceeds clip length {self.clip_seconds}s"
            )
        if self.max_events < 1 or len(self.count_weights) != self.max_events:
            raise ConfigError("count_weights must have one weight per event count 1..max_events")
        for name, weights in (("count", self.count_weights), ("class", self.class_weights)):
            if any(w < 0 for w in weights) or sum(weights) <= 0:
                raise ConfigError(f"{name} weights must be non-negative with a positive sum")
        if len(self.class_weights) != len(CLASS_ORDER):
            raise ConfigError(f"class_weights needs {len(CLASS_ORDER)} entries")
        f_lo, f_hi = self.freq_range
        if not 0 < f_lo <= f_hi < self.sample_rate / 2:
            raise ConfigError(f"frequency range {self.freq_range} outside (0, {self.sample_rate / 2})")
        if self.freq_step <= 0:
            raise ConfigError("freq_step must be positive")
        grid = self.frequency_grid()
        if self.class_weights[CLASS_ORDER.index(EventClass.CHIRP)] > 0:
            if self.chirp_min_sweep <= 0:
                raise ConfigError("chirp_min_sweep must be positive")
            if len(grid) < 2 or (grid[-1] - grid[0]) / 2 < self.chirp_min_sweep:
                raise ConfigError(
                    f"frequency range {self.freq_range} is too narrow for chirps sweeping {self.chirp_min_sweep} Hz"
                )
        a_lo, a_hi = self.amplitude_range
        if not 0 < a_lo <= a_hi <= 1:
            raise ConfigError(f"amplitude range {self.amplitude_range} outside (0, 1]")

    @property
    def num_samples(self) -> int:
        return int(round(self.sample_rate * self.clip_seconds))

    def frequency_grid(self) -> np.ndarray:
        lo, hi = self.freq_range
        return np.arange(lo, hi + 1e-9, self.freq_step)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GrammarConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown grammar keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class LatentConfig:
    bands: int = 8
    frames: int = 8
    log_floor: float = -10.0
    energy_eps: float = 1e-10

    @property
    def dim(self) -> int:
        return self.bands * self.frames

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LatentConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown latent keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Clip:
    samples: np.ndarray
    sample_rate: int

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.samples, dtype="<f8").tobytes()).hexdigest()


class Vocabulary:
    """Closed, versioned word list; id 0 is the unknown-word token"""

    UNK = "<unk>"
    TOKEN_PATTERN = re.compile(r"<unk>|\d+\.\d+|\d+|[a-z]+")

    def __init__(self, words: Sequence[str], version: str = "1"):
        if not words or words[0] != self.UNK:
            raise ConfigError(f"vocabulary must start with {self.UNK}")
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary contains duplicate words")
        self.words = list(words)
        self.version = str(version)
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def load(cls, path: Optional[os.PathLike] = None) -> "Vocabulary":
        path = Path(path or DEFAULT_VOCABULARY_PATH)
        version = "1"
        words = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if line.startswith("# version:"):
                        version = line.split(":", 1)[1].strip()
                    continue
                words.append(line)
        return cls(words, version)

    @property
    def size(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> List[str]:
        return self.TOKEN_PATTERN.findall(text.lower())

    def encode(self, text: str) -> List[int]:
        return [self.index.get(tok, 0) for tok in self.tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return {"version": self.version, "words": self.words}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(data["words"], data.get("version", "1"))


@dataclass(frozen=True)
class Caption:
    text: str
    tokens: Tuple[int, ...]
    source: str = "original"

    @classmethod
    def build(cls, text: str, vocab: Vocabulary, source: str = "original") -> "Caption":
        if source not in ("original", "enriched"):
            raise ConfigError(f"unknown caption source: {source}")
        return cls(text=text, tokens=tuple(vocab.encode(text)), source=source)


@dataclass
class DatasetRecord:
    record_id: str
    scene: EventScene
    clip_digest: str
    latent: np.ndarray  # float32, bands x frames
    original: Caption
    enriched: Optional[Caption] = None

    def caption(self, source: str) -> Caption:
        if source == "enriched" and self.enriched is not None:
            return self.enriched
        return self.original


def sample_scene(rng: RngStream, grammar: GrammarConfig, scene_id: str = "scene", noise_seed: int = 0) -> EventScene:
    """Draw one scene from the grammar."""
    grammar.validate()
    count_p = np.asarray(grammar.count_weights, dtype=np.float64)
    class_p = np.asarray(grammar.class_weights, dtype=np.float64)
    count = 1 + int(rng.choice(len(count_p), p=count_p / count_p.sum()))
    grid = grammar.frequency_grid()
    d_lo, d_hi = grammar.duration_range
    d_hi = min(d_hi, grammar.clip_seconds)
    events = []
    for _ in range(count):
        event_class = CLASS_ORDER[int(rng.choice(len(CLASS_ORDER), p=class_p / class_p.sum()))]
        duration = round(float(rng.uniform(d_lo, d_hi)), 3)
        duration = min(max(duration, d_lo), grammar.clip_seconds)
        onset = float(np.floor(rng.uniform(0.0, grammar.clip_seconds - duration) * 1000.0) / 1000.0)
        freq = freq_end = 0.0
        if event_class != EventClass.NOISE:
            freq = float(grid[int(rng.integers(0, len(grid)))])
        if event_class == EventClass.CHIRP:
            ends = grid[np.abs(grid - freq) >= grammar.chirp_min_sweep - 1e-9]
            freq_end = float(ends[int(rng.integers(0, len(ends)))])
        amplitude = round(float(rng.uniform(*grammar.amplitude_range)), 3)
        events.append(EventSpec(event_class, onset, duration, freq, freq_end, amplitude))
    events.sort(key=lambda e: e.onset)
    return EventScene(scene_id=scene_id, events=tuple(events), noise_seed=noise_seed)


def render(scene: EventScene, sample_rate: int = 8000, clip_seconds: float = 1.0) -> Clip:
    """Sum event waveforms into a clip and hard-clip to [-1, 1]."""
    total = int(round(sample_rate * clip_seconds))
    n = np.arange(total, dtype=np.float64)
    out = np.zeros(total)
    for idx, event in enumerate(scene.events):
        start = int(round(event.onset * sample_rate))
        stop = min(total, int(round((event.onset + event.duration) * sample_rate)))
        if stop <= start:
            continue
        if event.event_class == EventClass.TONE:
            out[start:stop] += event.amplitude * np.sin(2.0 * np.pi * event.freq * n[start:stop] / sample_rate)
        elif event.event_class == EventClass.CHIRP:
            t_rel = (n[start:stop] - start) / sample_rate
            out[start:stop] += event.amplitude * signal.chirp(
                t_rel, f0=event.freq, t1=event.duration, f1=event.freq_end, method="linear", phi=-90
            )
        else:
            rng = RngStream(scene.noise_seed, f"noise/{scene.scene_id}/{idx}")
            out[start:stop] += event.amplitude * rng.uniform(-1.0, 1.0, stop - start)
    return Clip(samples=np.clip(out, -1.0, 1.0), sample_rate=sample_rate)


def _band_groups(frame_len: int, bands: int) -> List[np.ndarray]:
    bins = frame_len // 2 + 1
    if bands < 1 or bands > bins:
        raise ConfigError(f"{bands} bands cannot split {bins} DFT bins")
    return np.array_split(np.arange(bins), bands)


def encode(
    clip: Clip,
    bands: int = 8,
    frames: int = 8,
    log_floor: float = -10.0,
    energy_eps: float = 1e-10,
) -> np.ndarray:
    """Log band energies of non-overlapping frames, shape (bands, frames)."""
    total = len(clip.samples)
    if frames < 1 or total % frames:
        raise ConfigError(f"clip of {total} samples cannot be split into {frames} frames")
    frame_len = total // frames
    power = np.abs(fft.rfft(clip.samples.reshape(frames, frame_len), axis=1)) ** 2 / frame_len
    energy = np.stack([power[:, g].sum(axis=1) for g in _band_groups(frame_len, bands)])
    return np.maximum(np.log(energy_eps + energy), log_floor)


def band_of_frequency(freq: float, sample_rate: int, frame_len: int, bands: int) -> int:
    """Index of the band whose DFT bins contain ``freq``."""
    bin_index = int(round(freq * frame_len / sample_rate))
    for b, group in enumerate(_band_groups(frame_len, bands)):
        if group[0] <= bin_index <= group[-1]:
            return b
    raise ConfigError(f"{freq} Hz is above the Nyquist frequency")


def base_caption_text(scene: EventScene) -> str:
    return " then ".join(CLASS_PHRASES[c] for c in scene.classes)


def base_caption(scene: EventScene, vocab: Vocabulary) -> Caption:
    """Terse template caption: class words in onset order, no parameters."""
    return Caption.build(base_caption_text(scene), vocab, source="original")


def parse_base_caption(text: str) -> List[EventClass]:
    lookup = {phrase: cls for cls, phrase in CLASS_PHRASES.items()}
    try:
        return [lookup[part.strip()] for part in text.split(" then ")]
    except KeyError as e:
        raise ParseError(f"not a base caption: {text!r}") from e


def _make_record(
    index: int,
    split: str,
    seed: int,
    grammar: GrammarConfig,
    latent_cfg: LatentConfig,
    vocab: Vocabulary,
) -> DatasetRecord:
    rng = RngStream(seed, f"{split}/scene/{index}")
    record_id = f"{split}-{index:05d}"
    scene = sample_scene(rng, grammar, scene_id=record_id, noise_seed=seed)
    clip = render(scene, grammar.sample_rate, grammar.clip_seconds)
    latent = encode(clip, latent_cfg.bands, latent_cfg.frames, latent_cfg.log_floor, latent_cfg.energy_eps)
    return DatasetRecord(
        record_id=record_id,
        scene=scene,
        clip_digest=clip.digest(),
        latent=latent.astype(np.float32),
        original=base_caption(scene, vocab),
    )


def generate_records(
    count: int,
    seed: int,
    grammar: GrammarConfig,
    latent_cfg: LatentConfig,
    vocab: Vocabulary,
    split: str = "train",
    workers: int = 1,
) -> List[DatasetRecord]:
    """Sample, render and encode ``count`` records; order is by index."""
    grammar.validate()
    if grammar.num_samples % latent_cfg.frames:
        raise ConfigError(f"{grammar.num_samples} samples cannot be split into {latent_cfg.frames} frames")

    def build(i: int) -> DatasetRecord:
        return _make_record(i, split, seed, grammar, latent_cfg, vocab)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, range(count)))
    else:
        records = [build(i) for i in range(count)]
    logger.info(f"Generated {len(records)} '{split}' records (seed {seed})")
    return records


def write_dataset(
    records: Sequence[DatasetRecord], path: os.PathLike, meta: Optional[Dict[str, Any]] = None
) -> Path:
    """Write manifest.jsonl, latents.bin (little-endian float32) and meta.json."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        offset = 0
        with open(out / MANIFEST_NAME, "w", encoding="utf-8") as manifest, open(out / LATENTS_NAME, "wb") as blob:
            for record in records:
                data = np.ascontiguousarray(record.latent, dtype="<f4").tobytes()
                blob.write(data)
                line = {
                    "record_id": record.record_id,
                    "scene": record.scene.to_dict(),
                    "clip_digest": record.clip_digest,
                    "caption": record.original.text,
                    "latent": {"offset": offset, "length": len(data), "shape": list(record.latent.shape)},
                }
                if record.enriched is not None:
                    line["enriched_caption"] = record.enriched.text
                manifest.write(json.dumps(line, sort_keys=True) + "\n")
                offset += len(data)
        meta = dict(meta or {})
        meta.setdefault("format_version", DATASET_FORMAT_VERSION)
        meta["count"] = len(records)
        with open(out / META_NAME, "w", encoding="utf-8") as f:
            json.dump(meta, f, sort_keys=True, indent=2)
        logger.info(f"Wrote {len(records)} records to {out}")
        return out
    except Exception as e:
        logger.error(f"Error writing dataset to {out}: {e}")
        raise


def read_dataset_meta(path: os.PathLike) -> Dict[str, Any]:
    meta_path = Path(path) / META_NAME
    if not meta_path.exists():
        raise DataError(f"dataset metadata not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_dataset(path: os.PathLike, vocab: Optional[Vocabulary] = None) -> List[DatasetRecord]:
    """Read a dataset directory back; validates every latent blob."""
    root = Path(path)
    meta = read_dataset_meta(root)
    if vocab is None:
        vocab = Vocabulary.from_dict(meta["vocabulary"]) if "vocabulary" in meta else Vocabulary.load()
    with open(root / LATENTS_NAME, "rb") as f:
        blob = f.read()
    records = []
    with open(root / MANIFEST_NAME, "r", encoding="utf-8") as manifest:
        for line_number, line in enumerate(manifest, start=1):
            try:
                data = json.loads(line)
                latent_info = data["latent"]
                offset, length = int(latent_info["offset"]), int(latent_info["length"])
                shape = tuple(int(s) for s in latent_info["shape"])
                record_id = data["record_id"]
                scene = EventScene.from_dict(data["scene"])
                clip_digest = data["clip_digest"]
                caption_text = data["caption"]
                enriched = data.get("enriched_caption")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"corrupt manifest entry: {e}", line_number) from e
            if length != int(np.prod(shape)) * 4 or offset + length > len(blob):
                raise IntegrityError(
                    f"record {record_id}: latent blob [{offset}, {offset + length}) "
                    f"does not match shape {shape} within {len(blob)} bytes"
                )
            latent = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset).reshape(shape)
            records.append(
                DatasetRecord(
                    record_id=record_id,
                    scene=scene,
                    clip_digest=clip_digest,
                    latent=latent.astype(np.float32),
                    original=Caption.build(caption_text, vocab, "original"),
                    enriched=Caption.build(enriched, vocab, "enriched") if enriched is not None else None,
                )
            )
    if "count" in meta and meta["count"] != len(records):
        raise IntegrityError(f"manifest has {len(records)} records, metadata says {meta['count']}")
    return records


def latent_matrix(records: Sequence[DatasetRecord]) -> np.ndarray:
    """Flattened float64 latents, one row per record."""
    return np.stack([r.latent.astype(np.float64).ravel() for r in records])
