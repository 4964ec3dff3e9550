"""Offline transformer embedding exporter for the case-based engine."""

from .corpus import KNOWN_KINDS, CaseRow, read_cases
from .encoding import TransformerEncoder, load_encoder
from .errors import ExportError
from .export import ExportReport, ExportSpec, export_embeddings
from .writer import write_embedding_file

__all__ = [
    "KNOWN_KINDS",
    "CaseRow",
    "ExportError",
    "ExportReport",
    "ExportSpec",
    "TransformerEncoder",
    "export_embeddings",
    "load_encoder",
    "read_cases",
    "write_embedding_file",
]
