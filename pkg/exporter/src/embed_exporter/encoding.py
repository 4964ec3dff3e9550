"""Transformer wrappers producing token states and sentence vectors.

The heavy dependencies load lazily so that spec validation, file
parsing, and ``--help`` stay instant.  Models always run in eval mode
under ``no_grad``, which makes exports deterministic for a fixed spec.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ExportError


class TransformerEncoder:
    """One checkpoint, exposing last-layer states and pooled vectors.

    Sentence vectors are attention-masked means of the last hidden
    layer, L2-normalized.  Inputs longer than ``max_length`` tokens are
    truncated; the truncation count is reported so callers can log it.
    """

    def __init__(self, model_id: str, max_length: int = 128,
                 batch_size: int = 8):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - deps pinned in package
            raise ExportError(f"transformers/torch unavailable: {exc}") from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
        self.model.eval()
        self._torch = torch
        self.model_id = model_id
        self.max_length = max_length
        self.batch_size = batch_size

    @property
    def hidden_size(self) -> int:
        return int(self.model.config.hidden_size)

    def _batches(self, texts: Sequence[str]):
        for start in range(0, len(texts), self.batch_size):
            yield texts[start:start + self.batch_size]

    def count_truncated(self, texts: Sequence[str]) -> int:
        """How many of ``texts`` exceed the length budget."""
        lengths = [len(ids) for ids in
                   self.tokenizer(list(texts), truncation=False)["input_ids"]]
        return sum(1 for length in lengths if length > self.max_length)

    def _forward(self, batch: Sequence[str]):
        inputs = self.tokenizer(list(batch), padding=True, truncation=True,
                                max_length=self.max_length,
                                return_tensors="pt")
        with self._torch.no_grad():
            states = self.model(**inputs).last_hidden_state
        return states, inputs["attention_mask"]

    def token_states(self, texts: Sequence[str]) -> list[np.ndarray]:
        """Last-layer hidden states per text, padding stripped."""
        results: list[np.ndarray] = []
        for batch in self._batches(texts):
            states, mask = self._forward(batch)
            lengths = mask.sum(dim=1).tolist()
            for i, length in enumerate(lengths):
                results.append(
                    states[i, :length].cpu().numpy().astype(np.float32))
        return results

    def sentence_vectors(self, texts: Sequence[str]) -> np.ndarray:
        """(N, hidden) unit-norm masked-mean vectors."""
        chunks = []
        for batch in self._batches(texts):
            states, mask = self._forward(batch)
            weights = mask.unsqueeze(-1).to(states.dtype)
            mean = (states * weights).sum(dim=1) / weights.sum(dim=1)
            norms = mean.norm(dim=-1, keepdim=True)
            if bool((norms == 0).any()):
                raise ExportError("degenerate zero sentence vector")
            chunks.append((mean / norms).cpu().numpy().astype(np.float32))
        if not chunks:
            return np.zeros((0, self.hidden_size), dtype=np.float32)
        return np.concatenate(chunks, axis=0)


def load_encoder(model_id: str, max_length: int = 128,
                 batch_size: int = 8) -> TransformerEncoder:
    return TransformerEncoder(model_id, max_length=max_length,
                              batch_size=batch_size)
