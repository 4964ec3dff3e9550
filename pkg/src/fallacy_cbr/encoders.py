"""Frozen text encoders.

Two variants sit behind one interface: a hashed character-n-gram encoder
that needs no model files and is fully deterministic, and a file-backed
encoder that serves token matrices and sentence vectors produced offline
by an exporter.  Both are immutable after construction; encoding is a
pure function of the input.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import (
    ConfigError,
    DimError,
    EncodeError,
    FormatError,
    MissingEmbeddingError,
)

SEP_TOKEN = "<SEP>"

EMBEDDING_MAGIC = b"CBRE"
EMBEDDING_VERSION = 1


@dataclass(frozen=True)
class EncodedSequence:
    """Token-level hidden states (T, D) plus a validity mask of length T."""

    states: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if states.ndim != 2 or states.shape[0] < 1:
            raise EncodeError(f"states must be (T>=1, D), got {states.shape}")
        if mask.shape != (states.shape[0],):
            raise EncodeError("mask length must equal token count")
        if not mask.any():
            raise EncodeError("at least one token must be unmasked")
        if not np.isfinite(states).all():
            raise EncodeError("states contain non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "mask", mask)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class EmbeddingVector:
    """A sentence-level vector, flagged when L2-normalized."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EncoderSpec:
    """Configuration for one encoder.

    ``buckets`` (hashed_ngram only) is the n-gram hash range; 0 means use
    ``dim`` buckets.  ``path`` points at an embedding file for the
    file_backed variant.  ``position_scale`` 0 disables the sinusoidal
    position offsets of the hashed encoder.
    """

    variant: str = "hashed_ngram"
    dim: int = 64
    buckets: int = 0
    path: str | None = None
    seed: int = 0
    position_scale: float = 0.1

    def __post_init__(self):
        if self.variant not in ("hashed_ngram", "file_backed"):
            raise ConfigError(f"unknown encoder variant: {self.variant!r}")
        if self.variant == "file_backed" and not self.path:
            raise ConfigError("file_backed encoder needs a path")
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "buckets": self.buckets,
                "path": self.path, "seed": self.seed,
                "position_scale": self.position_scale}

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderSpec":
        return cls(**obj)


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace/punctuation tokens; ``<SEP>`` survives verbatim."""
    tokens: list[str] = []
    for piece in text.split():
        if piece == SEP_TOKEN:
            tokens.append(SEP_TOKEN)
            continue
        tokens.extend(re.findall(r"[a-z0-9]+", piece.lower()))
    return tokens


def _sinusoidal_position(position: int, dim: int) -> np.ndarray:
    offsets = np.zeros(dim)
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * (2 * np.arange(half) / dim))
    angles = position * freqs
    offsets[0::2] = np.sin(angles)[: len(offsets[0::2])]
    offsets[1::2] = np.cos(angles)[: len(offsets[1::2])]
    return offsets


class HashedNgramEncoder:
    """Deterministic bag-of-character-3-grams token encoder.

    Each token's vector is a signed hash of its boundary-marked character
    3-grams, scaled to unit norm, plus a fixed sinusoidal position offset.
    The literal ``<SEP>`` token maps to a reserved fixed vector that never
    receives a position offset.
    """

    def __init__(self, spec: EncoderSpec):
        if spec.variant != "hashed_ngram":
            raise ConfigError(f"not a hashed_ngram spec: {spec.variant}")
        self.spec = spec
        self.dim = spec.dim
        self._buckets = spec.buckets or spec.dim
        self._key = hashlib.sha256(
            b"hashed-ngram-" + str(spec.seed).encode()).digest()[:16]
        self._sep_vector = self._reserved_vector(b"sep-reserved")
        self._token_cache: dict[str, np.ndarray] = {}

    def _hash(self, data: bytes) -> int:
        digest = hashlib.blake2b(data, digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little")

    def _reserved_vector(self, tag: bytes) -> np.ndarray:
        vector = np.zeros(self.dim)
        for i in range(max(3, self.dim // 8)):
            h = self._hash(tag + struct.pack("<I", i))
            sign = 1.0 if (h >> 32) & 1 else -1.0
            vector[h % self.dim] += sign
        if not vector.any():
            vector[0] = 1.0
        vector /= np.linalg.norm(vector)
        vector.setflags(write=False)
        return vector

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        marked = f"^{token}$"
        vector = np.zeros(self.dim)
        for i in range(len(marked) - 2):
            h = self._hash(marked[i:i + 3].encode())
            bucket = h % self._buckets
            sign = 1.0 if (h >> 32) & 1 else -1.0
            vector[bucket % self.dim] += sign
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            vector[self._hash(marked.encode()) % self.dim] = 1.0
            norm = 1.0
        vector /= norm
        vector.setflags(write=False)
        self._token_cache[token] = vector
        return vector

    def encode_tokens(self, text: str) -> EncodedSequence:
        tokens = tokenize(text)
        if not tokens:
            raise EncodeError(f"no tokens in text: {text!r}")
        states = np.empty((len(tokens), self.dim))
        for t, token in enumerate(tokens):
            if token == SEP_TOKEN:
                states[t] = self._sep_vector
            else:
                states[t] = self._token_vector(token)
                if self.spec.position_scale:
                    states[t] += self.spec.position_scale * \
                        _sinusoidal_position(t, self.dim)
        return EncodedSequence(states=states, mask=np.ones(len(tokens), bool))

    def sentence_embedding(self, text: str) -> EmbeddingVector:
        sequence = self.encode_tokens(text)
        return pooled_embedding(sequence)


class EmbeddingStore:
    """In-memory id -> (token matrix, optional sentence vector) map."""

    def __init__(self, dim: int, records: dict[str, tuple[np.ndarray, np.ndarray | None]]):
        self.dim = dim
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.records


class FileBackedEncoder:
    """Serves stored token matrices and sentence vectors, keyed by id."""

    def __init__(self, spec: EncoderSpec, store: EmbeddingStore | None = None):
        if spec.variant != "file_backed":
            raise ConfigError(f"not a file_backed spec: {spec.variant}")
        self.spec = spec
        self.store = store or load_embedding_file(spec.path)
        self.dim = self.store.dim
        # Reuse the hashed encoder's reserved vector so composed sequences
        # can carry separator rows at this dimension.
        helper = HashedNgramEncoder(EncoderSpec(dim=self.dim, seed=spec.seed))
        self.sep_vector = helper._sep_vector

    def encode_tokens(self, record_id: str) -> EncodedSequence:
        try:
            states, _ = self.store.records[record_id]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for id {record_id!r}") from None
        return EncodedSequence(states=states.copy(),
                               mask=np.ones(states.shape[0], bool))

    def sentence_embedding(self, record_id: str) -> EmbeddingVector:
        try:
            states, sentence = self.store.records[record_id]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for id {record_id!r}") from None
        if sentence is not None:
            return EmbeddingVector(values=sentence.copy(), normalized=True)
        return pooled_embedding(EncodedSequence(
            states=states.copy(), mask=np.ones(states.shape[0], bool)))


def pooled_embedding(sequence: EncodedSequence) -> EmbeddingVector:
    """Masked mean over token states, L2-normalized."""
    mean = sequence.states[sequence.mask].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise EncodeError("mean token state is the zero vector")
    return EmbeddingVector(values=mean / norm, normalized=True)


def make_encoder(spec: EncoderSpec):
    if spec.variant == "hashed_ngram":
        return HashedNgramEncoder(spec)
    return FileBackedEncoder(spec)


# ---------------------------------------------------------------------------
# Embedding file format
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "CBRE" | u32 version=1 | u32 dim | u64 count
#   per record:
#     u32 id_len | id (UTF-8) | u32 token_count | token_count*dim f32
#     u8 has_sentence_vec | [dim f32]

def _read_exact(handle: BinaryIO, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise FormatError(f"truncated embedding file while reading {what}")
    return data


def load_embedding_file(path: str | Path, expected_dim: int | None = None) -> EmbeddingStore:
    """Parse an embedding file, validating header, dims, and uniqueness."""
    path = Path(path)
    with open(path, "rb") as handle:
        magic = _read_exact(handle, 4, "magic")
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
        version, dim = struct.unpack("<II", _read_exact(handle, 8, "header"))
        if version != EMBEDDING_VERSION:
            raise FormatError(f"unsupported version {version}")
        if dim < 1:
            raise FormatError(f"bad dimension {dim}")
        if expected_dim is not None and dim != expected_dim:
            raise FormatError(f"file dim {dim} != configured dim {expected_dim}")
        (count,) = struct.unpack("<Q", _read_exact(handle, 8, "count"))
        records: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(handle, 4, f"record {i}"))
            record_id = _read_exact(handle, id_len, f"record {i} id").decode("utf-8")
            if record_id in records:
                raise FormatError(f"duplicate id {record_id!r}")
            (token_count,) = struct.unpack(
                "<I", _read_exact(handle, 4, f"record {i} token count"))
            raw = _read_exact(handle, 4 * token_count * dim, f"record {i} states")
            states = np.frombuffer(raw, dtype="<f4").reshape(token_count, dim)
            states = states.astype(np.float64)
            (has_sentence,) = struct.unpack(
                "<B", _read_exact(handle, 1, f"record {i} flag"))
            sentence = None
            if has_sentence:
                raw = _read_exact(handle, 4 * dim, f"record {i} sentence vector")
                sentence = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            records[record_id] = (states, sentence)
        if handle.read(1):
            raise FormatError("trailing bytes after last record")
    return EmbeddingStore(dim=dim, records=records)


def write_embedding_file(path: str | Path, dim: int,
                         records: Iterable[tuple[str, np.ndarray, np.ndarray | None]]) -> int:
    """Write records as an embedding file; returns the record count.

    Each record is (id, token matrix (T, dim), optional sentence vector).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    materialized = list(records)
    seen: set[str] = set()
    with open(path, "wb") as handle:
        handle.write(EMBEDDING_MAGIC)
        handle.write(struct.pack("<II", EMBEDDING_VERSION, dim))
        handle.write(struct.pack("<Q", len(materialized)))
        for record_id, states, sentence in materialized:
            if record_id in seen:
                raise FormatError(f"duplicate id {record_id!r}")
            seen.add(record_id)
            states = np.asarray(states, dtype=np.float64)
            if states.ndim != 2 or states.shape[1] != dim:
                raise DimError(f"record {record_id!r}: states must be (T, {dim})")
            encoded_id = record_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded_id)))
            handle.write(encoded_id)
            handle.write(struct.pack("<I", states.shape[0]))
            handle.write(states.astype("<f4").tobytes())
            if sentence is None:
                handle.write(struct.pack("<B", 0))
            else:
                sentence = np.asarray(sentence, dtype=np.float64)
                if sentence.shape != (dim,):
                    raise DimError(f"record {record_id!r}: sentence vector must be ({dim},)")
                handle.write(struct.pack("<B", 1))
                handle.write(sentence.astype("<f4").tobytes())
    return len(materialized)
