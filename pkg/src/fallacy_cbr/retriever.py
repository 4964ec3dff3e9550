"""Cosine top-k retrieval over a case database and input composition.

The database is small enough that retrieval is an exhaustive scan: every
score is computed, sorted descending with ties broken by ascending case
id, and the top k returned.  Retrieval never looks at labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import CaseDatabase
from .encoders import SEP_TOKEN, EmbeddingVector
from .errors import ConfigError, DegenerateVectorError, DimError, IndexMissingError
from .labels import RepresentationKind


@dataclass(frozen=True)
class RetrievalHit:
    """One retrieved case: id, cosine score, and 1-based rank."""

    case_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class ComposedInput:
    """The query representation and the concatenated similar-cases string."""

    query_text: str
    similars_text: str
    hits: tuple[RetrievalHit, ...] = field(default_factory=tuple)


def _as_values(vector) -> np.ndarray:
    if isinstance(vector, EmbeddingVector):
        return vector.values
    return np.asarray(vector, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    va, vb = _as_values(a), _as_values(b)
    if va.shape != vb.shape:
        raise DimError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    norm_a = np.linalg.norm(va)
    norm_b = np.linalg.norm(vb)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(va, vb) / (norm_a * norm_b), -1.0, 1.0))


def retrieve_top_k(db: CaseDatabase, kind: RepresentationKind, query,
                   k: int, exclude_id: str | None = None) -> list[RetrievalHit]:
    """Exhaustive top-k scan of the database index for ``kind``.

    Returns min(k, available) hits ordered by descending score, ties by
    ascending case id.  ``exclude_id`` drops the query's own database row
    so a training query can never retrieve itself.
    """
    if k < 0:
        raise ConfigError(f"k must be nonnegative, got {k}")
    if kind not in db.index:
        raise IndexMissingError(f"database has no index for kind {kind.value!r}")
    if k == 0:
        return []
    matrix = db.index[kind]
    values = _as_values(query)
    if matrix.shape[1] != values.shape[0]:
        raise DimError(f"query dim {values.shape[0]} != index dim {matrix.shape[1]}")
    query_norm = np.linalg.norm(values)
    if query_norm == 0.0:
        raise DegenerateVectorError("cannot retrieve with a zero query vector")
    row_norms = np.linalg.norm(matrix, axis=1)
    if np.any(row_norms == 0.0):
        raise DegenerateVectorError("database index contains a zero row")
    scores = np.clip(matrix @ values / (row_norms * query_norm), -1.0, 1.0)

    scored = [
        (float(scores[i]), case.id)
        for i, case in enumerate(db.cases)
        if exclude_id is None or case.id != exclude_id
    ]
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [RetrievalHit(case_id=case_id, score=score, rank=rank)
            for rank, (score, case_id) in enumerate(scored[:k], start=1)]


def compose_case_string(query_repr: str, similar_reprs: Sequence[str],
                        sep: str = SEP_TOKEN, sep_between: bool = False,
                        hits: Sequence[RetrievalHit] = ()) -> ComposedInput:
    """Concatenate the query with its retrieved cases.

    Default layout puts a single separator after the query and joins the
    retrieved representations with spaces; ``sep_between`` inserts the
    separator between every pair instead.  With no retrieved cases the
    result degenerates to the bare query.
    """
    if not sep:
        raise ConfigError("separator must be non-empty")
    if not similar_reprs:
        composed = query_repr
    elif sep_between:
        composed = f"{query_repr} {sep} " + f" {sep} ".join(similar_reprs)
    else:
        composed = f"{query_repr} {sep} " + " ".join(similar_reprs)
    return ComposedInput(query_text=query_repr, similars_text=composed,
                         hits=tuple(hits))
