"""Dataset ingestion, class balancing, and case-database construction.

A :class:`Case` is one argument, optionally labeled with a fallacy class
and optionally carrying generated enrichment texts.  A
:class:`CaseDatabase` is the immutable, embedding-indexed store the
retriever searches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoders import FileBackedEncoder
from .errors import (
    AugmentationError,
    ConfigError,
    LabelParseError,
    MissingEnrichmentError,
    RowError,
)
from .labels import FALLACY_LABELS, RepresentationKind, canonical_label

logger = logging.getLogger(__name__)

_SYNTHETIC_ID_RE = re.compile(r"-aug\d+$")


@dataclass(frozen=True)
class Case:
    """One argument, its optional label, and its enrichment texts.

    ``enrichments`` maps each available representation kind to the
    generated auxiliary text for that kind; the TEXT kind always maps to
    the raw text itself.
    """

    id: str
    text: str
    label: str | None = None
    enrichments: Mapping[RepresentationKind, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise RowError(f"case {self.id!r} has empty text")
        merged = dict(self.enrichments)
        merged[RepresentationKind.TEXT] = self.text
        object.__setattr__(self, "enrichments", merged)
        if self.label is not None:
            object.__setattr__(self, "label", canonical_label(self.label))

    def has(self, kind: RepresentationKind) -> bool:
        return kind in self.enrichments

    def represent(self, kind: RepresentationKind) -> str:
        """The representation string for ``kind``.

        TEXT returns the raw text; any other kind returns the raw text
        followed by the enrichment, so every representation starts with
        the original argument.
        """
        if kind is RepresentationKind.TEXT:
            return self.text
        try:
            extra = self.enrichments[kind]
        except KeyError:
            raise MissingEnrichmentError(
                f"case {self.id!r} has no {kind.value} enrichment"
            ) from None
        return f"{self.text} {extra}"

    def with_enrichment(self, kind: RepresentationKind, text: str) -> "Case":
        merged = dict(self.enrichments)
        merged[kind] = text
        return Case(id=self.id, text=self.text, label=self.label, enrichments=merged)

    @property
    def is_synthetic(self) -> bool:
        """True for cases created by :func:`balance_classes`."""
        return _SYNTHETIC_ID_RE.search(self.id) is not None


def _count_labels(cases: Iterable[Case]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for case in cases:
        if case.label is not None:
            counts[case.label] = counts.get(case.label, 0) + 1
    return counts


@dataclass(frozen=True)
class LabeledCorpus:
    """Train/test case lists with disjoint ids."""

    train: tuple[Case, ...]
    test: tuple[Case, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        train_ids = {c.id for c in self.train}
        test_ids = {c.id for c in self.test}
        clash = train_ids & test_ids
        if clash:
            raise RowError(f"train/test ids overlap: {sorted(clash)[:5]}")

    def label_counts(self, split: str) -> dict[str, int]:
        if split not in ("train", "test"):
            raise ConfigError(f"unknown split: {split!r}")
        return _count_labels(getattr(self, split))


# ---------------------------------------------------------------------------
# Loading and saving
# ---------------------------------------------------------------------------

def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("csv", "jsonl"):
        return suffix
    raise ConfigError(f"cannot infer format from {path.name!r}; pass format=")


def _case_from_json(obj: dict, split: str, row: int) -> Case:
    where = f"{split} row {row}"
    text = obj.get("text")
    if not isinstance(text, str) or not text.strip():
        raise RowError(f"{where}: missing or empty text")
    raw_label = obj.get("label")
    if raw_label is None:
        raise RowError(f"{where}: missing label")
    try:
        label = canonical_label(raw_label)
    except LabelParseError as exc:
        raise LabelParseError(f"{where}: {exc}") from None
    enrichments = {}
    for key, value in (obj.get("enrichments") or {}).items():
        kind = RepresentationKind(key)
        if kind is not RepresentationKind.TEXT:
            enrichments[kind] = value
    case_id = obj.get("id") or f"{split}-{row}"
    return Case(id=case_id, text=text, label=label, enrichments=enrichments)


def load_split(path: str | Path, split: str, format: str | None = None) -> list[Case]:
    """Load one split file (CSV with ``text,label`` header, or JSONL)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    fmt = format or _infer_format(path)
    cases: list[Case] = []
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or "text" not in reader.fieldnames \
                    or "label" not in reader.fieldnames:
                raise RowError(f"{path.name}: expected header with text,label")
            for row, record in enumerate(reader):
                cases.append(_case_from_json(
                    {"text": record["text"], "label": record["label"],
                     "id": record.get("id")},
                    split, row))
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as handle:
            for row, line in enumerate(handle):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RowError(f"{split} row {row}: bad JSON ({exc})") from None
                cases.append(_case_from_json(obj, split, row))
    else:
        raise ConfigError(f"unknown format: {fmt!r}")
    return cases


def load_dataset(path: str | Path, format: str | None = None) -> LabeledCorpus:
    """Load a corpus from ``path``.

    ``path`` may be a directory containing ``train.csv``/``train.jsonl``
    and optionally ``test.*``, or a single file whose rows all become the
    train split.
    """
    path = Path(path)
    if path.is_dir():
        train: list[Case] = []
        test: list[Case] = []
        for split, bucket in (("train", train), ("test", test)):
            for ext in ("jsonl", "csv"):
                candidate = path / f"{split}.{ext}"
                if candidate.exists():
                    bucket.extend(load_split(candidate, split, format))
                    break
        if not train:
            raise ConfigError(f"{path}: no train.csv or train.jsonl found")
        return LabeledCorpus(train=tuple(train), test=tuple(test))
    return LabeledCorpus(train=tuple(load_split(path, "train", format)), test=())


def save_cases(cases: Iterable[Case], path: str | Path) -> None:
    """Write cases as JSONL with a stable key order.

    Saving, loading, and saving again produces byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for case in cases:
            obj: dict = {"id": case.id, "text": case.text, "label": case.label}
            extra = {
                kind.value: text for kind, text in sorted(
                    case.enrichments.items(), key=lambda item: item[0].value)
                if kind is not RepresentationKind.TEXT
            }
            if extra:
                obj["enrichments"] = extra
            handle.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Class balancing by synonym substitution
# ---------------------------------------------------------------------------

def load_lexicon(path: str | Path) -> dict[str, list[str]]:
    """Load a synonym lexicon from JSONL rows {"token", "substitutes"}."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    lexicon: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as handle:
        for row, line in enumerate(handle):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RowError(f"lexicon row {row}: bad JSON ({exc})") from None
            token = obj.get("token")
            substitutes = obj.get("substitutes")
            if not token or not isinstance(substitutes, list) or not substitutes:
                raise RowError(f"lexicon row {row}: need token and substitutes")
            lexicon[token.lower()] = [str(s) for s in substitutes]
    return lexicon


_WORD_CORE_RE = re.compile(r"[A-Za-z0-9']+")


def _substitute_tokens(text: str, lexicon: Mapping[str, list[str]],
                       rng: np.random.Generator) -> str:
    """Replace 1-3 lexicon tokens in ``text`` with seeded substitutes.

    Tokens without a lexicon entry are skipped; if nothing matches, the
    text is returned unchanged.
    """
    tokens = text.split()
    candidates = []
    for pos, token in enumerate(tokens):
        match = _WORD_CORE_RE.search(token)
        if match and match.group().lower() in lexicon:
            candidates.append(pos)
    if not candidates:
        return text
    n_subs = min(int(rng.integers(1, 4)), len(candidates))
    chosen = rng.choice(len(candidates), size=n_subs, replace=False)
    for slot in sorted(int(i) for i in chosen):
        pos = candidates[slot]
        token = tokens[pos]
        match = _WORD_CORE_RE.search(token)
        core = match.group()
        options = lexicon[core.lower()]
        replacement = options[int(rng.integers(0, len(options)))]
        if core[0].isupper():
            replacement = replacement[0].upper() + replacement[1:]
        tokens[pos] = token[:match.start()] + replacement + token[match.end():]
    return " ".join(tokens)


def balance_classes(corpus: LabeledCorpus, target: int,
                    lexicon: str | Path | Mapping[str, list[str]],
                    seed: int,
                    labels: Sequence[str] | None = None) -> LabeledCorpus:
    """Grow every class in the train split to at least ``target`` cases.

    Synthetic cases are built by seeded synonym substitution over existing
    cases of the same class and get ids ``<source_id>-augN``.  Classes
    already at or above ``target`` are left alone, and the test split is
    never touched.

    ``labels`` is the set of classes that must be balanced (default: all
    thirteen); a listed class with no train cases raises
    :class:`AugmentationError`.
    """
    if target < 0:
        raise ConfigError(f"target must be nonnegative, got {target}")
    if not isinstance(lexicon, Mapping):
        lexicon = load_lexicon(lexicon)
    wanted = list(labels) if labels is not None else list(FALLACY_LABELS)
    by_label: dict[str, list[Case]] = {label: [] for label in wanted}
    for case in corpus.train:
        if case.label in by_label:
            by_label[case.label].append(case)

    new_train = list(corpus.train)
    aug_counter: dict[str, int] = {}
    for class_idx, label in enumerate(wanted):
        originals = by_label[label]
        if not originals:
            raise AugmentationError(
                f"class {label!r} has no train cases to amplify")
        needed = target - len(originals)
        if needed <= 0:
            continue
        rng = np.random.default_rng([seed, class_idx])
        for i in range(needed):
            source = originals[i % len(originals)]
            n = aug_counter.get(source.id, 0) + 1
            aug_counter[source.id] = n
            new_text = _substitute_tokens(source.text, lexicon, rng)
            new_train.append(Case(id=f"{source.id}-aug{n}", text=new_text,
                                  label=source.label))
    return LabeledCorpus(train=tuple(new_train), test=corpus.test)


# ---------------------------------------------------------------------------
# Case database
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseDatabase:
    """Immutable store of labeled cases with per-kind embedding indices.

    ``index[kind]`` is an (N, D) float64 matrix whose row i is the
    L2-normalized sentence embedding of ``cases[i].represent(kind)``.
    """

    cases: tuple[Case, ...]
    index: Mapping[RepresentationKind, np.ndarray]
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        for case in self.cases:
            if case.label is None:
                raise ConfigError(f"database case {case.id!r} has no label")
        for kind, matrix in self.index.items():
            if matrix.shape[0] != len(self.cases):
                raise ConfigError(
                    f"index for {kind.value} has {matrix.shape[0]} rows for "
                    f"{len(self.cases)} cases")
            matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.cases)

    def case_by_id(self, case_id: str) -> Case:
        for case in self.cases:
            if case.id == case_id:
                return case
        raise KeyError(case_id)

    def fingerprint(self) -> str:
        """Content hash over cases and indices; stable across processes."""
        digest = hashlib.sha256()
        for case in self.cases:
            digest.update(case.id.encode())
            digest.update(b"\x00")
            digest.update(case.text.encode())
            digest.update(b"\x00")
            digest.update((case.label or "").encode())
            for kind in sorted(case.enrichments, key=lambda k: k.value):
                digest.update(kind.value.encode())
                digest.update(case.enrichments[kind].encode())
            digest.update(b"\x01")
        for kind in sorted(self.index, key=lambda k: k.value):
            digest.update(kind.value.encode())
            digest.update(np.ascontiguousarray(self.index[kind]).tobytes())
        return digest.hexdigest()

    def index_fingerprint(self) -> str:
        """Content hash over the embedding indices only."""
        digest = hashlib.sha256()
        for kind in sorted(self.index, key=lambda k: k.value):
            digest.update(kind.value.encode())
            digest.update(np.ascontiguousarray(self.index[kind]).tobytes())
        return digest.hexdigest()


def build_case_database(cases: Sequence[Case], encoder,
                        kinds: Sequence[RepresentationKind] = (RepresentationKind.TEXT,),
                        ratio: float = 1.0, seed: int = 0,
                        include_synthetic: bool = True) -> CaseDatabase:
    """Index ``cases`` for retrieval and optionally subsample per class.

    Similarity for an enriched kind is computed over the full enriched
    representation, not the raw text; cases missing that enrichment fall
    back to raw text with a logged warning.  ``encoder`` must provide
    ``sentence_embedding``; a file-backed encoder is keyed by
    ``<case_id>#<kind>`` instead of the text itself.
    """
    file_backed = isinstance(encoder, FileBackedEncoder)
    kept = [c for c in cases if include_synthetic or not c.is_synthetic]
    index: dict[RepresentationKind, np.ndarray] = {}
    for kind in kinds:
        rows = []
        missing = 0
        for case in kept:
            if file_backed:
                key = f"{case.id}#{kind.value}"
                if key not in encoder.store and kind is not RepresentationKind.TEXT:
                    key = f"{case.id}#{RepresentationKind.TEXT.value}"
                    missing += 1
            elif case.has(kind):
                key = case.represent(kind)
            else:
                key = case.text
                missing += 1
            rows.append(encoder.sentence_embedding(key).values)
        if missing:
            logger.warning("%d/%d cases missing %s enrichment; indexed raw text",
                           missing, len(kept), kind.value)
        if rows:
            index[kind] = np.asarray(rows, dtype=np.float64)
        else:
            index[kind] = np.zeros((0, encoder.dim), dtype=np.float64)
    db = CaseDatabase(cases=tuple(kept), index=index, ratio=1.0, seed=seed)
    if ratio != 1.0:
        db = subsample_database(db, ratio, seed)
    return db


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def subsample_database(db: CaseDatabase, ratio: float, seed: int) -> CaseDatabase:
    """Stratified per-class subsample keeping round(ratio * count), min 1.

    Selection is seeded per class, so the kept id set at a smaller ratio
    is always a subset of the kept set at a larger ratio under the same
    seed.  ``ratio`` 1.0 returns the database unchanged.
    """
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return CaseDatabase(cases=db.cases, index=dict(db.index),
                            ratio=1.0, seed=seed)

    positions_by_label: dict[str, list[int]] = {}
    for pos, case in enumerate(db.cases):
        positions_by_label.setdefault(case.label, []).append(pos)

    keep: list[int] = []
    for label in sorted(positions_by_label):
        positions = positions_by_label[label]
        rng = np.random.default_rng([seed, hash_label(label)])
        order = rng.permutation(len(positions))
        m = max(1, _round_half_up(ratio * len(positions)))
        keep.extend(positions[i] for i in order[:m])
    keep.sort()

    cases = tuple(db.cases[i] for i in keep)
    index = {kind: matrix[keep].copy() for kind, matrix in db.index.items()}
    return CaseDatabase(cases=cases, index=index, ratio=ratio, seed=seed)


def hash_label(label: str) -> int:
    """Stable small integer for seeding per-class generators."""
    digest = hashlib.sha256(label.encode()).digest()
    return int.from_bytes(digest[:4], "little")
