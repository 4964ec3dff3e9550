"""Case-based reasoning engine for logical fallacy classification.

The pipeline retrieves labeled cases similar to a new argument, fuses
them with the argument through a multi-head cross-attention adapter, and
classifies the result into one of thirteen fallacy classes.  Encoders and
the retrieval index are frozen features; only the adapter and classifier
head train.
"""

from .corpus import (
    Case,
    CaseDatabase,
    LabeledCorpus,
    balance_classes,
    build_case_database,
    load_dataset,
    save_cases,
    subsample_database,
)
from .encoders import (
    EncoderSpec,
    load_embedding_file,
    make_encoder,
    write_embedding_file,
)
from .errors import CbrError
from .evaluation import (
    AblationGrid,
    MetricsReport,
    OverlapReport,
    ablation_sweep,
    confusion_matrix,
    evaluate_model,
    frequency_baseline,
    label_overlap,
    weighted_prf,
)
from .labels import FALLACY_LABELS, N_CLASSES, RepresentationKind
from .model import CbrFallacyClassifier
from .retriever import compose_case_string, cosine_similarity, retrieve_top_k
from .training import (
    TrainConfig,
    TrainedModel,
    finite_difference_check,
    forward_example,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "Case",
    "CaseDatabase",
    "CbrError",
    "CbrFallacyClassifier",
    "EncoderSpec",
    "FALLACY_LABELS",
    "LabeledCorpus",
    "MetricsReport",
    "N_CLASSES",
    "OverlapReport",
    "RepresentationKind",
    "TrainConfig",
    "TrainedModel",
    "ablation_sweep",
    "balance_classes",
    "build_case_database",
    "compose_case_string",
    "confusion_matrix",
    "cosine_similarity",
    "evaluate_model",
    "finite_difference_check",
    "forward_example",
    "frequency_baseline",
    "label_overlap",
    "load_checkpoint",
    "load_dataset",
    "load_embedding_file",
    "make_encoder",
    "retrieve_top_k",
    "save_cases",
    "save_checkpoint",
    "subsample_database",
    "train",
    "weighted_prf",
    "write_embedding_file",
]
