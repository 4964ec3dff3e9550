"""Binary embedding file writer.

The layout below is the interface contract with the engine's loader and
must match it byte for byte: ``CBRE`` magic, little-endian u32 version
and dimension, u64 record count, then per record a length-prefixed
UTF-8 id, a u32 token count, the float32 token-state matrix, a u8 flag,
and (when the flag is set) a float32 sentence vector.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ExportError

MAGIC = b"CBRE"
VERSION = 1


def write_embedding_file(path: str | Path, dim: int,
                         records: Iterable[tuple[str, np.ndarray, np.ndarray | None]]) -> int:
    """Write (id, token states, optional sentence vector) records.

    Returns the record count.  Ids must be unique and every array must
    already have the declared dimension; violations raise ExportError
    rather than producing a file the engine would reject.
    """
    if dim < 1:
        raise ExportError(f"dimension must be positive, got {dim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    materialized = list(records)
    seen: set[str] = set()
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", VERSION, dim))
        handle.write(struct.pack("<Q", len(materialized)))
        for record_id, states, sentence in materialized:
            if record_id in seen:
                raise ExportError(f"duplicate record id {record_id!r}")
            seen.add(record_id)
            states = np.asarray(states)
            if states.ndim != 2 or states.shape[1] != dim:
                raise ExportError(
                    f"record {record_id!r}: token states must be (T, {dim}), "
                    f"got {states.shape}")
            encoded = record_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", states.shape[0]))
            handle.write(states.astype("<f4").tobytes())
            if sentence is None:
                handle.write(struct.pack("<B", 0))
            else:
                sentence = np.asarray(sentence)
                if sentence.shape != (dim,):
                    raise ExportError(
                        f"record {record_id!r}: sentence vector must be "
                        f"({dim},), got {sentence.shape}")
                handle.write(struct.pack("<B", 1))
                handle.write(sentence.astype("<f4").tobytes())
    return len(materialized)
