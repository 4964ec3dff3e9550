"""Fixtures: tiny transformer checkpoints built locally, no downloads."""

from __future__ import annotations

import os

import pytest

from samplecorpus import TEN_CASES, write_corpus

os.environ.setdefault("TRANSFORMERS_VERBOSITY", "error")
os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

_WORDS = (
    "insult", "attack", "person", "smear", "slander",
    "cause", "after", "follows", "trigger", "effect",
    "all", "every", "always", "sample", "sweeping",
    "claim", "argument", "the", "a", "is", "evidence", "shaky",
)


def _build_checkpoint(path, hidden_size: int, seed: int) -> str:
    import torch
    from transformers import BertConfig, BertModel, BertTokenizerFast

    path.mkdir(parents=True, exist_ok=True)
    vocab_file = path / "base-vocab.txt"
    vocab_file.write_text(
        "\n".join(("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]") + _WORDS)
        + "\n")
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file),
                                  do_lower_case=True)
    config = BertConfig(vocab_size=len(_WORDS) + 5, hidden_size=hidden_size,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=hidden_size * 2,
                        max_position_embeddings=128)
    torch.manual_seed(seed)
    model = BertModel(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_model(tmp_path_factory) -> str:
    """A 16-dim randomly initialized checkpoint on local disk."""
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt") / "tiny-16",
                             hidden_size=16, seed=0)


@pytest.fixture(scope="session")
def tiny_model_24(tmp_path_factory) -> str:
    """A second checkpoint with a different hidden size."""
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt") / "tiny-24",
                             hidden_size=24, seed=1)


@pytest.fixture
def ten_case_corpus(tmp_path) -> str:
    return write_corpus(tmp_path / "cases.jsonl", TEN_CASES)
