"""
Caption augmentation: prompt rule sets, rewriter requests, fact-fidelity
scoring, rule-set selection and original/enriched caption mixing
"""

import json
import logging
import os
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from backend.errors import ConfigError, ContentError, DataError, LabError, RewriterTransportError
from backend.synthworld import (
    Caption,
    DatasetRecord,
    EventClass,
    EventScene,
    EventSpec,
    Vocabulary,
)
from backend.tensorkit import RngStream

logger = logging.getLogger(__name__)

DEFAULT_RULESETS_PATH = Path(__file__).resolve().parent.parent / "data" / "rulesets.json"
FACT_FIELDS = ("class", "onset", "frequency", "duration")
DETAIL_FIELDS = ("class", "pitch", "frequency", "onset", "duration", "loudness")
TEMPLATE_PLACEHOLDERS = {"caption", "events"}
CLASS_WORDS = {c.value for c in EventClass}


def format_seconds(value: float) -> str:
    return f"{value:.1f}"


def format_hertz(value: float) -> str:
    return str(int(round(value)))


@dataclass(frozen=True)
class PromptRuleSet:
    ruleset_id: str
    template: str
    min_words: int = 5
    max_words: int = 80
    must_mention: Tuple[str, ...] = ("class",)
    detail_fields: Tuple[str, ...] = ("class",)
    description: str = ""

    def validate(self):
        try:
            names = {name for _, name, _, _ in string.Formatter().parse(self.template) if name is not None}
        except ValueError as e:
            raise ConfigError(f"rule set {self.ruleset_id}: malformed template: {e}") from e
        unknown = names - TEMPLATE_PLACEHOLDERS
        if unknown:
            raise ConfigError(f"rule set {self.ruleset_id}: unresolvable placeholders {sorted(unknown)}")
        if not 0 < self.min_words <= self.max_words:
            raise ConfigError(f"rule set {self.ruleset_id}: invalid length range {self.min_words}..{self.max_words}")
        bad = set(self.must_mention) - set(FACT_FIELDS)
        if bad:
            raise ConfigError(f"rule set {self.ruleset_id}: unknown must-mention fields {sorted(bad)}")
        bad = set(self.detail_fields) - set(DETAIL_FIELDS)
        if bad:
            raise ConfigError(f"rule set {self.ruleset_id}: unknown detail fields {sorted(bad)}")

    def render_prompt(self, caption: str, events: Sequence[Dict[str, Any]]) -> str:
        return self.template.format(caption=caption, events=json.dumps(list(events), sort_keys=True))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PromptRuleSet":
        ruleset = cls(
            ruleset_id=data["id"],
            template=data["template"],
            min_words=int(data.get("min_words", 5)),
            max_words=int(data.get("max_words", 80)),
            must_mention=tuple(data.get("must_mention", ("class",))),
            detail_fields=tuple(data.get("detail_fields", ("class",))),
            description=data.get("description", ""),
        )
        ruleset.validate()
        return ruleset


def load_rulesets(path: Optional[os.PathLike] = None) -> List[PromptRuleSet]:
    """Load prompt rule sets from the shipped JSON file."""
    path = Path(path or DEFAULT_RULESETS_PATH)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return [PromptRuleSet.from_dict(item) for item in data["rulesets"]]
    except (json.JSONDecodeError, KeyError) as e:
        logger.error(f"Error loading rule sets from {path}: {e}")
        raise ConfigError(f"invalid rule set file {path}: {e}") from e


@dataclass
class RewriterRequest:
    ruleset: str
    caption: str
    events: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"ruleset": self.ruleset, "caption": self.caption, "events": self.events}

    def to_wire(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"

    @classmethod
    def from_wire(cls, line: str) -> "RewriterRequest":
        data = json.loads(line)
        return cls(ruleset=data["ruleset"], caption=data["caption"], events=list(data.get("events", [])))

    def scene(self) -> EventScene:
        return EventScene(scene_id="request", events=tuple(EventSpec.from_dict(e) for e in self.events))


@dataclass
class RewriterResponse:
    text: str
    status: str = "ok"

    def to_wire(self) -> str:
        return json.dumps({"text": self.text}) + "\n"

    @classmethod
    def from_wire(cls, line: str) -> "RewriterResponse":
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise RewriterTransportError(f"malformed rewriter response: {line[:80]!r}") from e
        text = str(data.get("text", "")).strip()
        return cls(text=text, status="ok" if text else "empty")


def request_for(scene: EventScene, base: Caption, ruleset: PromptRuleSet) -> RewriterRequest:
    return RewriterRequest(
        ruleset=ruleset.ruleset_id,
        caption=base.text,
        events=[e.to_dict() for e in scene.events],
    )


def scene_facts(scene: EventScene) -> List[Tuple[str, int, str]]:
    """Facts a faithful description must let a reader recover."""
    facts = []
    for i, event in enumerate(scene.events):
        facts.append(("class", i, event.event_class.value))
        facts.append(("onset", i, format_seconds(event.onset)))
        if event.event_class != EventClass.NOISE:
            facts.append(("frequency", i, format_hertz(event.freq)))
        if event.event_class == EventClass.CHIRP:
            facts.append(("frequency", i, format_hertz(event.freq_end)))
    return facts


class FidelityScorer:
    """Fraction of scene facts recoverable from a text.

    Class facts are matched as an ordered subsequence of class words; onset
    and frequency facts as exact tokens.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def recovered(self, scene: EventScene, text: str) -> Tuple[int, int]:
        tokens = self.vocab.tokenize(text or "")
        token_set = set(tokens)
        class_tokens = [t for t in tokens if t in CLASS_WORDS]
        facts = scene_facts(scene)
        hits = 0
        cursor = 0
        for kind, _, value in facts:
            if kind == "class":
                while cursor < len(class_tokens) and class_tokens[cursor] != value:
                    cursor += 1
                if cursor < len(class_tokens):
                    hits += 1
                    cursor += 1
            elif value in token_set:
                hits += 1
        return hits, len(facts)

    def __call__(self, scene: EventScene, text: str) -> float:
        hits, total = self.recovered(scene, text)
        return hits / total if total else 0.0


def missing_mentions(scene: EventScene, text: str, ruleset: PromptRuleSet, vocab: Vocabulary) -> List[str]:
    tokens = vocab.tokenize(text)
    token_set = set(tokens)
    missing = []
    for name in ruleset.must_mention:
        if name == "class":
            wanted = [e.event_class.value for e in scene.events]
            found = iter(t for t in tokens if t in CLASS_WORDS)
            # ordered subsequence test
            if not all(any(w == f for f in found) for w in wanted):
                missing.append(name)
        elif name == "duration":
            if not all(format_seconds(e.duration) in token_set for e in scene.events):
                missing.append(name)
        else:
            values = [v for kind, _, v in scene_facts(scene) if kind == name]
            if not all(v in token_set for v in values):
                missing.append(name)
    return missing


def enrich(
    scene: EventScene,
    base: Caption,
    ruleset: PromptRuleSet,
    client,
    vocab: Vocabulary,
) -> Caption:
    """Ask the rewriter for an enriched caption and enforce the rule set's constraints."""
    response = client.rewrite(request_for(scene, base, ruleset), ruleset)
    text = (response.text or "").strip()
    if not text:
        raise ContentError(f"rewriter returned an empty caption for {scene.scene_id}")
    missing = missing_mentions(scene, text, ruleset, vocab)
    if missing:
        raise ContentError(f"caption for {scene.scene_id} misses required facts: {', '.join(missing)}")
    words = len(text.split())
    if not ruleset.min_words <= words <= ruleset.max_words:
        logger.warning(
            f"Caption for {scene.scene_id} has {words} words, "
            f"outside {ruleset.ruleset_id} range {ruleset.min_words}..{ruleset.max_words}"
        )
    return Caption.build(text, vocab, source="enriched")


def score_ruleset(
    ruleset: PromptRuleSet,
    subset: Sequence[Tuple[EventScene, Caption]],
    client,
    scorer: FidelityScorer,
) -> float:
    """Mean fidelity of the rewriter's output under ``ruleset`` on an evaluation subset."""
    if not subset:
        raise DataError("rule-set evaluation subset is empty")
    total = 0.0
    for scene, base in subset:
        try:
            text = client.rewrite(request_for(scene, base, ruleset), ruleset).text
        except RewriterTransportError as e:
            logger.warning(f"Rewriter failed on {scene.scene_id} with {ruleset.ruleset_id}: {e}")
            text = ""
        total += scorer(scene, text)
    score = total / len(subset)
    logger.info(f"Rule set {ruleset.ruleset_id}: mean fidelity {score:.4f}")
    return score


def select_ruleset(
    rulesets: Sequence[PromptRuleSet],
    subset: Sequence[Tuple[EventScene, Caption]],
    client,
    scorer: FidelityScorer,
) -> str:
    """Id of the rule set with the highest mean score; ties go to the lowest id."""
    if not rulesets:
        raise ConfigError("no rule sets to select from")
    scores = {rs.ruleset_id: score_ruleset(rs, subset, client, scorer) for rs in rulesets}
    return min(scores, key=lambda rid: (-scores[rid], rid))


def select_configuration(
    rulesets: Sequence[PromptRuleSet],
    clients: Dict[str, Any],
    subset: Sequence[Tuple[EventScene, Caption]],
    scorer: FidelityScorer,
) -> Tuple[str, str, Dict[Tuple[str, str], float]]:
    """Best (rule set, rewriter) pair across several rewriters."""
    if not rulesets or not clients:
        raise ConfigError("need at least one rule set and one rewriter")
    scores = {}
    for client_name in sorted(clients):
        for rs in rulesets:
            scores[(rs.ruleset_id, client_name)] = score_ruleset(rs, subset, clients[client_name], scorer)
    best = min(scores, key=lambda key: (-scores[key], key[0], key[1]))
    return best[0], best[1], scores


@dataclass(frozen=True)
class MixPolicy:
    ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"mixing ratio must lie in [0, 1], got {self.ratio}")


def mix_sample(
    rng: RngStream, original: Caption, enriched: Optional[Caption], policy: MixPolicy
) -> Caption:
    """Enriched caption with probability ratio, else the original one."""
    if policy.ratio > 0 and enriched is None:
        raise DataError("mixing ratio is positive but the enriched caption is missing")
    u = float(rng.random())
    return enriched if u < policy.ratio else original


def augment_records(
    records: Sequence[DatasetRecord],
    ruleset: PromptRuleSet,
    client,
    vocab: Vocabulary,
    workers: int = 1,
    retries: int = 2,
) -> List[DatasetRecord]:
    """Attach enriched captions; output order follows the input order."""

    def one(record: DatasetRecord) -> DatasetRecord:
        for attempt in range(retries + 1):
            try:
                caption = enrich(record.scene, record.original, ruleset, client, vocab)
                return replace(record, enriched=caption)
            except RewriterTransportError as e:
                if attempt == retries:
                    raise
                logger.warning(f"Retrying {record.record_id} after transport error: {e}")
        raise LabError("unreachable")

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(one, records))
        else:
            out = [one(r) for r in records]
        logger.info(f"Enriched {len(out)} captions with rule set {ruleset.ruleset_id}")
        return out
    except Exception as e:
        logger.error(f"Error augmenting captions: {e}")
        raise
