"""Canonical fallacy labels and representation kinds."""

from __future__ import annotations

import enum

from .errors import LabelParseError

# Canonical label set, in canonical (alphabetical) order.  This order is
# used everywhere an index is needed: classifier outputs, confusion
# matrices, argmax tie-breaking.
FALLACY_LABELS: tuple[str, ...] = (
    "ad_hominem",
    "ad_populum",
    "appeal_to_emotion",
    "circular_reasoning",
    "equivocation",
    "fallacy_of_credibility",
    "fallacy_of_extension",
    "fallacy_of_logic",
    "fallacy_of_relevance",
    "false_causality",
    "false_dilemma",
    "faulty_generalization",
    "intentional",
)

N_CLASSES = len(FALLACY_LABELS)

_LABEL_TO_INDEX = {label: i for i, label in enumerate(FALLACY_LABELS)}


class RepresentationKind(enum.Enum):
    """The ways a case can be represented for retrieval and encoding.

    TEXT is the raw argument and always exists; the other four are
    optional generated enrichments concatenated onto the raw text.
    """

    TEXT = "text"
    COUNTERARGUMENTS = "counterarguments"
    GOALS = "goals"
    EXPLANATIONS = "explanations"
    STRUCTURE = "structure"


ENRICHMENT_KINDS = (
    RepresentationKind.COUNTERARGUMENTS,
    RepresentationKind.GOALS,
    RepresentationKind.EXPLANATIONS,
    RepresentationKind.STRUCTURE,
)


def canonical_label(raw: str) -> str:
    """Normalize ``raw`` to a canonical label or raise :class:`LabelParseError`.

    Accepts any casing and either spaces or underscores between words:
    ``"Faulty Generalization"`` and ``"faulty_generalization"`` both map to
    ``"faulty_generalization"``.
    """
    candidate = raw.strip().lower().replace(" ", "_")
    if candidate not in _LABEL_TO_INDEX:
        raise LabelParseError(f"unknown fallacy label: {raw!r}")
    return candidate


def label_index(label: str) -> int:
    """Position of ``label`` in :data:`FALLACY_LABELS`."""
    try:
        return _LABEL_TO_INDEX[label]
    except KeyError:
        raise LabelParseError(f"unknown fallacy label: {label!r}") from None


def label_display(label: str) -> str:
    """Human-readable (space-separated) form of a canonical label."""
    return canonical_label(label).replace("_", " ")


def parse_kind(raw: str | RepresentationKind) -> RepresentationKind:
    """Coerce a string like ``"goals"`` to a :class:`RepresentationKind`."""
    if isinstance(raw, RepresentationKind):
        return raw
    try:
        return RepresentationKind(raw.strip().lower())
    except ValueError:
        valid = ", ".join(k.value for k in RepresentationKind)
        raise LabelParseError(
            f"unknown representation kind: {raw!r} (expected one of {valid})"
        ) from None
