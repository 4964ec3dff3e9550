"""Prompt assembly, completion-endpoint client, and the enrichment cache.

Auxiliary case texts (counterarguments, goals, explanations, structure)
are produced by a text-completion endpoint from few-shot prompts.  Every
response is cached in an append-only JSONL file keyed by a content hash,
so regenerating with a warm cache performs zero network calls and the
whole step can run offline afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import requests

from .corpus import Case
from .errors import (
    ClientError,
    ConfigError,
    FormatError,
    LabelParseError,
    LeakageError,
    OfflineCacheMissError,
    UnsupportedKindError,
)
from .labels import (
    ENRICHMENT_KINDS,
    FALLACY_LABELS,
    RepresentationKind,
    canonical_label,
    label_display,
)

logger = logging.getLogger(__name__)

# Bump when any instruction below changes; part of every cache key.
TEMPLATE_VERSION = 1

DEFAULT_DEMO_COUNT = 5


@dataclass(frozen=True)
class PromptTemplate:
    """A fixed instruction with a single {case} slot for the argument."""

    kind: RepresentationKind
    instruction: str

    def __post_init__(self):
        if self.instruction.count("{case}") != 1:
            raise ConfigError(
                f"template for {self.kind.value} must contain exactly one "
                "{case} placeholder")

    def render(self, case_text: str) -> str:
        return self.instruction.replace("{case}", case_text)


SEED_TEMPLATES: Mapping[RepresentationKind, PromptTemplate] = {
    RepresentationKind.EXPLANATIONS: PromptTemplate(
        RepresentationKind.EXPLANATIONS, 'Analyze the argument "{case}"'),
    RepresentationKind.GOALS: PromptTemplate(
        RepresentationKind.GOALS, 'Express the goal of the argument "{case}"'),
    RepresentationKind.COUNTERARGUMENTS: PromptTemplate(
        RepresentationKind.COUNTERARGUMENTS,
        'Represent the counterargument to the argument "{case}"'),
}

# Structure demonstrations are hand-written, so structure has no public
# seed template; this instruction only heads the final slot of the
# few-shot prompt when generating structures in bulk.
_STRUCTURE_TEMPLATE = PromptTemplate(
    RepresentationKind.STRUCTURE,
    'Represent the structure of the argument "{case}"')


def build_seed_prompt(kind: RepresentationKind, case: Case) -> str:
    """Zero-shot instruction for one case, with the text double-quoted."""
    template = SEED_TEMPLATES.get(kind)
    if template is None:
        raise UnsupportedKindError(
            f"no seed prompt for kind {kind.value!r}")
    return template.render(case.text)


def _instruction_for(kind: RepresentationKind) -> PromptTemplate:
    if kind is RepresentationKind.STRUCTURE:
        return _STRUCTURE_TEMPLATE
    template = SEED_TEMPLATES.get(kind)
    if template is None:
        raise UnsupportedKindError(f"kind {kind.value!r} is never generated")
    return template


@dataclass(frozen=True)
class Demonstration:
    """One worked example (prompt plus desired response) for few-shot use."""

    prompt: str
    response: str

    def check_leakage(self) -> None:
        """Reject responses that state any fallacy class by name."""
        lowered = self.response.lower()
        for label in FALLACY_LABELS:
            for variant in (label, label_display(label)):
                if variant in lowered:
                    raise LeakageError(
                        f"demonstration response mentions class {variant!r}")


def build_fewshot_prompt(kind: RepresentationKind,
                         demos: Sequence[Demonstration], case: Case) -> str:
    """Demonstrations followed by the new case's instruction and a colon."""
    if not demos:
        raise ConfigError("need at least one demonstration")
    parts = [f"{demo.prompt}:\n{demo.response}\n###\n" for demo in demos]
    parts.append(f"{_instruction_for(kind).render(case.text)}:")
    return "".join(parts)


def load_demos(path: str | Path) -> list[Demonstration]:
    """Read a demonstrations JSONL file, enforcing the leakage guard."""
    demos = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                demo = Demonstration(prompt=obj["prompt"],
                                     response=obj["response"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(
                    f"{path}, line {lineno}: bad demonstration: {exc}") from None
            demo.check_leakage()
            demos.append(demo)
    if not demos:
        raise FormatError(f"{path}: no demonstrations found")
    return demos


def load_default_demos(kind: RepresentationKind) -> list[Demonstration]:
    """Demonstrations shipped with the package, five per kind."""
    if kind not in ENRICHMENT_KINDS:
        raise UnsupportedKindError(f"no demos for kind {kind.value!r}")
    ref = resources.files("fallacy_cbr").joinpath(
        f"data/demos/{kind.value}.jsonl")
    with resources.as_file(ref) as path:
        return load_demos(path)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

def cache_key(kind: RepresentationKind, case_text: str, model_id: str,
              template_version: int = TEMPLATE_VERSION) -> str:
    payload = json.dumps(
        [kind.value, case_text, model_id, template_version],
        ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EnrichmentRecord:
    """One cached completion plus the inputs that produced it."""

    cache_key: str
    kind: str
    case_id: str
    prompt: str
    response: str
    model_id: str
    created_at: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EnrichmentRecord":
        obj = json.loads(line)
        return cls(**{f: obj[f] for f in cls.__dataclass_fields__})


class EnrichmentCache:
    """Append-only JSONL store of completions, keyed by cache_key.

    Later lines win on duplicate keys, which keeps appends from multiple
    runs safe.  Writes open, append, and close so a single appender
    serializes them while readers keep their in-memory view.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[str, EnrichmentRecord] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as handle:
                for lineno, line in enumerate(handle, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = EnrichmentRecord.from_json(line)
                    except (json.JSONDecodeError, KeyError) as exc:
                        raise FormatError(
                            f"{self.path}, line {lineno}: bad cache record: "
                            f"{exc}") from None
                    self._records[record.cache_key] = record

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: str) -> EnrichmentRecord | None:
        return self._records.get(key)

    def put(self, record: EnrichmentRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(record.to_json() + "\n")
        self._records[record.cache_key] = record


# ---------------------------------------------------------------------------
# Completion client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompletionClientConfig:
    """Connection and sampling settings for the completion endpoint."""

    endpoint: str = "http://localhost:8080/complete"
    api_key_env: str = "CBR_API_KEY"
    model_id: str = "completion-v1"
    max_retries: int = 3
    backoff_base_ms: int = 250
    temperature: float = 0.0
    max_tokens: int = 256
    offline: bool = False
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.max_retries < 1:
            raise ConfigError("max_retries must be at least 1")
        if self.backoff_base_ms < 0:
            raise ConfigError("backoff_base_ms must be nonnegative")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")


class CompletionClient:
    """Posts prompts to a JSON completion endpoint, with retry and cache.

    The wire protocol is a single POST of ``{"model", "prompt",
    "max_tokens", "temperature"}`` answered by ``{"text": ...}``; the API
    key comes from the environment variable named in the config and is
    sent as a bearer token.  ``network_calls`` counts actual POSTs, which
    lets callers verify that warm-cache runs never touch the network.
    """

    def __init__(self, config: CompletionClientConfig, cache: EnrichmentCache,
                 demos: Mapping[RepresentationKind, Sequence[Demonstration]]
                 | None = None,
                 session: requests.Session | None = None):
        self.config = config
        self.cache = cache
        self._demos = dict(demos) if demos else {}
        self._session = session or requests.Session()
        self.network_calls = 0

    def demos_for(self, kind: RepresentationKind) -> Sequence[Demonstration]:
        if kind not in self._demos:
            self._demos[kind] = load_default_demos(kind)
        return self._demos[kind]

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise ClientError(
                f"environment variable {self.config.api_key_env} is not set")
        return key

    def complete(self, prompt: str) -> str:
        """POST the prompt, retrying with exponential backoff on failure."""
        if self.config.offline:
            raise ClientError("client is offline; network calls are forbidden")
        payload = {
            "model": self.config.model_id,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
        }
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries):
            if attempt:
                time.sleep(self.config.backoff_base_ms / 1000.0
                           * 2 ** (attempt - 1))
            try:
                self.network_calls += 1
                response = self._session.post(
                    self.config.endpoint, json=payload, headers=headers,
                    timeout=self.config.timeout_s)
                if response.status_code != 200:
                    raise ClientError(
                        f"endpoint returned status {response.status_code}")
                body = response.json()
                text = body.get("text")
                if not isinstance(text, str):
                    raise ClientError("response JSON has no 'text' string")
                return text
            except (requests.RequestException, ValueError, ClientError) as exc:
                last_error = exc
                logger.warning("completion attempt %d/%d failed: %s",
                               attempt + 1, self.config.max_retries, exc)
        raise ClientError(
            f"completion failed after {self.config.max_retries} attempts: "
            f"{last_error}")


def generate_enrichment(client: CompletionClient, kind: RepresentationKind,
                        case: Case) -> str:
    """Cached completion of the kind's few-shot prompt for one case."""
    if kind not in ENRICHMENT_KINDS:
        raise UnsupportedKindError(f"kind {kind.value!r} is never generated")
    key = cache_key(kind, case.text, client.config.model_id)
    cached = client.cache.get(key)
    if cached is not None:
        return cached.response
    if client.config.offline:
        raise OfflineCacheMissError(
            f"offline mode and no cached response for case {case.id!r} "
            f"kind {kind.value!r}")
    prompt = build_fewshot_prompt(kind, client.demos_for(kind), case)
    text = client.complete(prompt).strip()
    record = EnrichmentRecord(
        cache_key=key, kind=kind.value, case_id=case.id, prompt=prompt,
        response=text, model_id=client.config.model_id,
        created_at=datetime.now(timezone.utc).isoformat())
    client.cache.put(record)
    return text


def enrich_cases(client: CompletionClient, cases: Iterable[Case],
                 kinds: Sequence[RepresentationKind]) -> list[Case]:
    """Attach generated representations for the given kinds to every case."""
    enriched = []
    for case in cases:
        for kind in kinds:
            case = case.with_enrichment(kind, generate_enrichment(
                client, kind, case))
        enriched.append(case)
    return enriched


# ---------------------------------------------------------------------------
# Few-shot label prediction baseline
# ---------------------------------------------------------------------------

# Class list order used inside the label-prediction prompt.
PROMPT_CLASS_ORDER = (
    "fallacy_of_logic", "circular_reasoning", "appeal_to_emotion",
    "intentional", "faulty_generalization", "fallacy_of_extension",
    "false_dilemma", "ad_populum", "ad_hominem", "false_causality",
    "equivocation", "fallacy_of_relevance", "fallacy_of_credibility",
)

CLASS_LIST_LINE = "classes = [" + ", ".join(
    f"'{label_display(label)}'" for label in PROMPT_CLASS_ORDER) + "]"


def build_label_prompt(demos: Sequence[Case], case: Case) -> str:
    """Class list, separator, one labeled example per class, then the query."""
    by_label = {}
    for demo in demos:
        if demo.label is None:
            raise ConfigError(f"label demo {demo.id!r} has no label")
        if demo.label in by_label:
            raise ConfigError(f"duplicate demo for class {demo.label!r}")
        by_label[demo.label] = demo
    missing = [label for label in PROMPT_CLASS_ORDER if label not in by_label]
    if missing:
        raise ConfigError(
            f"need one demo per class; missing {', '.join(missing)}")
    parts = [CLASS_LIST_LINE, "\n", "--------", "\n"]
    for label in PROMPT_CLASS_ORDER:
        demo = by_label[label]
        parts.append(f"{demo.text}\n{label_display(label)}\n###\n")
    parts.append(f"{case.text}\n")
    return "".join(parts)


def parse_label(completion: str) -> str:
    """Map a completion's first line onto a canonical label."""
    stripped = completion.strip()
    if not stripped:
        raise LabelParseError("empty completion")
    first_line = stripped.splitlines()[0].strip()
    return canonical_label(first_line)
