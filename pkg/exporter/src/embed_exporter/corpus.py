"""Reading the engine's normalized JSONL corpus files.

The exporter deliberately parses the interchange format itself instead
of depending on the engine package: the JSONL rows and the binary
embedding file are the entire contract between the two tools.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ExportError

# Representation kinds the engine understands, by their wire names.
KNOWN_KINDS = ("text", "counterarguments", "explanations", "goals",
               "structure")


@dataclass(frozen=True)
class CaseRow:
    """One corpus row: an argument plus its generated auxiliary texts."""

    id: str
    text: str
    label: str | None = None
    enrichments: Mapping[str, str] = field(default_factory=dict)

    def representation(self, kind: str) -> str | None:
        """Text to encode for ``kind``: the argument, then the auxiliary
        text appended after a space.  None when the row lacks that kind."""
        if kind == "text":
            return self.text
        extra = self.enrichments.get(kind)
        if extra is None:
            return None
        return f"{self.text} {extra}"


def read_cases(path: str | Path) -> list[CaseRow]:
    """Load corpus rows from a JSONL file.

    Rows without an explicit id get ``train-<row>``, matching the id the
    engine assigns when it loads a bare single-split file, so record ids
    line up either way.
    """
    path = Path(path)
    if not path.exists():
        raise ExportError(f"no such corpus file: {path}")
    if path.suffix.lower() != ".jsonl":
        raise ExportError(
            f"{path.name}: expected a normalized .jsonl corpus (run the "
            "engine's ingest command on raw CSV input first)")
    rows: list[CaseRow] = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"row {number}: bad JSON ({exc})") from None
            text = obj.get("text")
            if not isinstance(text, str) or not text.strip():
                raise ExportError(f"row {number}: missing or empty text")
            enrichments = {}
            for key, value in (obj.get("enrichments") or {}).items():
                if key not in KNOWN_KINDS:
                    raise ExportError(f"row {number}: unknown enrichment "
                                      f"kind {key!r}")
                if key != "text":
                    enrichments[key] = str(value)
            rows.append(CaseRow(id=obj.get("id") or f"train-{number}",
                                text=text, label=obj.get("label"),
                                enrichments=enrichments))
    seen: set[str] = set()
    for row in rows:
        if row.id in seen:
            raise ExportError(f"duplicate case id {row.id!r}")
        seen.add(row.id)
    return rows
