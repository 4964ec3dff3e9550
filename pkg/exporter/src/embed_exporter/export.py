"""Corpus-to-embedding-file export."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus import KNOWN_KINDS, read_cases
from .encoding import load_encoder
from .errors import ExportError
from .writer import write_embedding_file

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExportSpec:
    """Everything that determines the bytes of one export."""

    token_model: str
    sentence_model: str
    corpus: str
    output: str
    kinds: tuple[str, ...] = ("text",)
    batch_size: int = 8
    max_length: int = 128

    def __post_init__(self):
        if not self.kinds:
            raise ExportError("at least one representation kind is required")
        for kind in self.kinds:
            if kind not in KNOWN_KINDS:
                raise ExportError(f"unknown representation kind {kind!r}")
        if len(set(self.kinds)) != len(self.kinds):
            raise ExportError("duplicate representation kinds")
        if self.batch_size < 1:
            raise ExportError(
                f"batch_size must be positive, got {self.batch_size}")
        if self.max_length < 2:
            raise ExportError(
                f"max_length must be at least 2, got {self.max_length}")


@dataclass(frozen=True)
class ExportReport:
    """What one export produced, for logging and CLI output."""

    output: str
    dim: int
    count: int
    truncated: int
    skipped: int


def export_embeddings(spec: ExportSpec, token_encoder=None,
                      sentence_encoder=None) -> ExportReport:
    """Encode every case x kind and write one embedding file.

    Record ids are ``<case_id>#<kind>``; each record carries the token
    encoder's last-layer states and the sentence encoder's unit-norm
    vector.  Cases lacking an enrichment kind are skipped (the engine
    falls back to their plain-text record), and over-length inputs are
    truncated; both counts are logged and reported.

    Preloaded encoders may be passed in; by default both models resolve
    from ``spec``.  The two hidden sizes must agree because the file
    header records a single dimension.
    """
    cases = read_cases(spec.corpus)
    if token_encoder is None:
        token_encoder = load_encoder(spec.token_model, spec.max_length,
                                     spec.batch_size)
    if sentence_encoder is None:
        if spec.sentence_model == spec.token_model:
            sentence_encoder = token_encoder
        else:
            sentence_encoder = load_encoder(spec.sentence_model,
                                            spec.max_length, spec.batch_size)
    dim = int(token_encoder.hidden_size)
    if int(sentence_encoder.hidden_size) != dim:
        raise ExportError(
            f"token model hidden size {dim} != sentence model hidden size "
            f"{sentence_encoder.hidden_size}; the file records one dimension")

    ids: list[str] = []
    texts: list[str] = []
    skipped = 0
    for kind in spec.kinds:
        for case in cases:
            text = case.representation(kind)
            if text is None:
                skipped += 1
                continue
            ids.append(f"{case.id}#{kind}")
            texts.append(text)
    if skipped:
        logger.info("skipped %d case/kind pairs with no enrichment", skipped)

    truncated = token_encoder.count_truncated(texts) if texts else 0
    if truncated:
        logger.info("truncated %d inputs to %d tokens", truncated,
                    spec.max_length)
    states = token_encoder.token_states(texts)
    vectors = sentence_encoder.sentence_vectors(texts)

    count = write_embedding_file(
        spec.output, dim,
        ((record_id, state, vector)
         for record_id, state, vector in zip(ids, states, vectors)))
    return ExportReport(output=str(Path(spec.output)), dim=dim, count=count,
                        truncated=truncated, skipped=skipped)
