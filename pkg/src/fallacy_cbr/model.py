"""Scikit-learn style estimator wrapping the full pipeline.

``CbrFallacyClassifier`` takes raw argument strings and label strings, so
it slots into sklearn tooling (cross_val_score, Pipeline, clone) without
exposing cases, databases, or checkpoints.  The heavy lifting lives in
:mod:`training`; this layer only validates input and adapts conventions,
raising ``ValueError`` where sklearn callers expect it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Case, build_case_database, subsample_database
from .encoders import EncoderSpec, make_encoder
from .errors import CbrError, LabelParseError
from .labels import FALLACY_LABELS, RepresentationKind, canonical_label, parse_kind
from .training import ModelRuntime, TrainConfig, TrainedModel, train


def validate_texts(X) -> list[str]:
    """Coerce X to a non-empty list of non-empty strings."""
    if isinstance(X, str):
        raise ValueError("X must be a sequence of strings, not a single string")
    texts = list(X)
    if not texts:
        raise ValueError("X is empty")
    for i, text in enumerate(texts):
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"X[{i}] is not a non-empty string")
    return texts


def validate_labels(y, n: int) -> list[str]:
    """Coerce y to canonical label strings, one per sample."""
    labels = [str(v) for v in np.asarray(y).ravel()]
    if len(labels) != n:
        raise ValueError(f"X has {n} samples but y has {len(labels)}")
    try:
        return [canonical_label(v) for v in labels]
    except LabelParseError as exc:
        raise ValueError(str(exc)) from None


class CbrFallacyClassifier(ClassifierMixin, BaseEstimator):
    """Fallacy classifier that reasons over retrieved labeled cases.

    ``fit`` builds a case database from the training texts, then trains
    the attention adapter and classifier head on top of frozen encoders.
    ``predict`` retrieves each query's nearest cases and classifies the
    fused representation.

    Parameters mirror the training configuration; ``representation`` is a
    string so the estimator clones cleanly.
    """

    def __init__(self, k: int = 1, db_ratio: float = 1.0,
                 representation: str = "text", heads: int = 8, dim: int = 64,
                 hidden_dim: int | None = None, epochs: int = 20,
                 batch_size: int = 16, learning_rate: float = 1e-3,
                 optimizer: str = "adam", seed: int = 0,
                 attention_enabled: bool = True, pool: str = "mean"):
        self.k = k
        self.db_ratio = db_ratio
        self.representation = representation
        self.heads = heads
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.seed = seed
        self.attention_enabled = attention_enabled
        self.pool = pool

    def _config(self) -> TrainConfig:
        kind = (self.representation
                if isinstance(self.representation, RepresentationKind)
                else parse_kind(self.representation))
        try:
            return TrainConfig(
                k=self.k, db_ratio=self.db_ratio, representation=kind,
                heads=self.heads, dim=self.dim, hidden_dim=self.hidden_dim,
                epochs=self.epochs, batch_size=self.batch_size,
                learning_rate=self.learning_rate, optimizer=self.optimizer,
                seed=self.seed, attention_enabled=self.attention_enabled,
                pool=self.pool)
        except CbrError as exc:
            raise ValueError(str(exc)) from None

    def fit(self, X, y) -> "CbrFallacyClassifier":
        """Build the case database from (X, y) and train on it."""
        texts = validate_texts(X)
        labels = validate_labels(y, len(texts))
        config = self._config()
        cases = [Case(id=f"train-{i:05d}", text=text, label=label)
                 for i, (text, label) in enumerate(zip(texts, labels))]
        spec = EncoderSpec(dim=config.dim, seed=config.seed)
        db = build_case_database(cases, make_encoder(spec),
                                 kinds=(config.representation,))
        if config.db_ratio != 1.0:
            db = subsample_database(db, config.db_ratio, config.seed)
        self.model_: TrainedModel = train(config, db, cases, spec, spec)
        self.db_ = db
        self.classes_ = np.asarray(FALLACY_LABELS, dtype=object)
        self.n_features_in_ = 1
        return self

    def _forward_all(self, X) -> list:
        check_is_fitted(self, "model_")
        texts = validate_texts(X)
        runtime = ModelRuntime(self.model_, self.db_)
        cases = [Case(id=f"query-{i:05d}", text=text)
                 for i, text in enumerate(texts)]
        return [runtime.forward(case)[0] for case in cases]

    def predict(self, X) -> np.ndarray:
        """Canonical label string for each input text."""
        return np.asarray([p.argmax for p in self._forward_all(X)],
                          dtype=object)

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, columns ordered as ``classes_``."""
        return np.vstack([p.probs for p in self._forward_all(X)])
