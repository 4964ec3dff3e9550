"""Sample corpus rows and a JSONL writer shared across test modules.

Lives outside conftest so test modules can import it by a unique name
no matter which suites run together.
"""

from __future__ import annotations

import json


def write_corpus(path, rows) -> str:
    """Write corpus rows ({"id", "text", "label", "enrichments"?}) as JSONL."""
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return str(path)


TEN_CASES = [
    {"id": f"c{i}", "text": text, "label": label}
    for i, (text, label) in enumerate([
        ("insult attack person", "ad_hominem"),
        ("smear slander person", "ad_hominem"),
        ("attack the person not the claim", "ad_hominem"),
        ("cause after effect", "false_causality"),
        ("effect follows trigger", "false_causality"),
        ("after the cause the effect follows", "false_causality"),
        ("all sample always", "faulty_generalization"),
        ("every sample is sweeping", "faulty_generalization"),
        ("always every all", "faulty_generalization"),
        ("sweeping claim from a sample", "faulty_generalization"),
    ])
]
