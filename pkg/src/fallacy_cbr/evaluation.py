"""Metrics, baselines, label-overlap analysis, and the ablation sweep.

Reports are plain dataclasses with JSON/CSV serialization so downstream
tooling never has to import this package to read results.  All report
writes go through a temp-file-then-rename step, which keeps partially
written cells out of a resumed sweep.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Case, CaseDatabase, subsample_database
from .encoders import EncoderSpec
from .errors import ConfigError, ShapeError
from .labels import FALLACY_LABELS, N_CLASSES, RepresentationKind, label_index
from .training import ModelRuntime, TrainConfig, TrainedModel, train

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """13x13 integer counts; row is the gold class, column the prediction."""

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise ShapeError(
                f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got "
                f"{self.counts.shape}")

    def add(self, gold: str, pred: str) -> None:
        self.counts[label_index(gold), label_index(pred)] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(golds: Sequence[str], preds: Sequence[str]) -> ConfusionMatrix:
    if len(golds) != len(preds):
        raise ShapeError(
            f"{len(golds)} gold labels vs {len(preds)} predictions")
    if not golds:
        raise ShapeError("no (gold, prediction) pairs")
    cm = ConfusionMatrix()
    for gold, pred in zip(golds, preds):
        cm.add(gold, pred)
    return cm


@dataclass
class MetricsReport:
    """Support-weighted precision/recall/F1 plus the per-class breakdown."""

    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    per_class: dict[str, dict[str, float]]
    config: dict = field(default_factory=dict)
    db_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "config": self.config,
            "db_fingerprint": self.db_fingerprint,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(**{f: obj[f] for f in
                      ("weighted_precision", "weighted_recall", "weighted_f1",
                       "accuracy", "per_class", "config", "db_fingerprint")})

    def save(self, path: str | Path) -> None:
        _atomic_write_text(Path(path),
                           json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class OverlapReport:
    """Mean fraction of retrieved labels matching gold and predictions."""

    ground_truth_overlap: float
    prediction_overlap: float
    k: int
    representation: str

    def __post_init__(self):
        for name in ("ground_truth_overlap", "prediction_overlap"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} {value} outside [0, 1]")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def weighted_prf(cm: ConfusionMatrix, config: dict | None = None,
                 db_fingerprint: str = "") -> MetricsReport:
    """Per-class precision/recall/F1 and their support-weighted means.

    A zero denominator scores 0, so a class the model never predicts
    contributes zero precision rather than an error.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ShapeError("confusion matrix has no counts")
    tp = np.diag(counts).astype(float)
    gold_totals = counts.sum(axis=1).astype(float)
    pred_totals = counts.sum(axis=0).astype(float)

    per_class: dict[str, dict[str, float]] = {}
    weighted = np.zeros(3)
    for i, label in enumerate(FALLACY_LABELS):
        precision = tp[i] / pred_totals[i] if pred_totals[i] else 0.0
        recall = tp[i] / gold_totals[i] if gold_totals[i] else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_class[label] = {"precision": precision, "recall": recall,
                            "f1": f1, "support": int(gold_totals[i])}
        weighted += gold_totals[i] * np.array([precision, recall, f1])
    weighted /= total
    return MetricsReport(
        weighted_precision=float(weighted[0]),
        weighted_recall=float(weighted[1]),
        weighted_f1=float(weighted[2]),
        accuracy=float(tp.sum() / total),
        per_class=per_class,
        config=dict(config or {}),
        db_fingerprint=db_fingerprint)


def _gold_labels(testset) -> list[str]:
    """Accepts a sequence of cases or a label -> count mapping."""
    if isinstance(testset, Mapping):
        golds = []
        for label in FALLACY_LABELS:
            golds.extend([label] * int(testset.get(label, 0)))
        return golds
    golds = []
    for case in testset:
        if case.label is None:
            raise ConfigError(f"test case {case.id!r} has no label")
        golds.append(case.label)
    return golds


def frequency_baseline(train_label_counts: Mapping[str, int], testset,
                       seed: int = 0, trials: int = 1000) -> MetricsReport:
    """Predict by sampling labels from the training distribution.

    Runs ``trials`` independent draws over the whole test set and averages
    every metric, so the report approximates the baseline's expectation
    rather than one lucky sample.
    """
    golds = _gold_labels(testset)
    if not golds:
        raise ConfigError("test set is empty")
    if trials < 1:
        raise ConfigError(f"trials must be positive, got {trials}")
    counts = np.array([float(train_label_counts.get(label, 0))
                       for label in FALLACY_LABELS])
    if counts.sum() <= 0:
        raise ConfigError("train label counts are all zero")
    probs = counts / counts.sum()

    rng = np.random.default_rng(seed)
    sums = np.zeros(4)
    per_class_sums = {label: np.zeros(3) for label in FALLACY_LABELS}
    support = {label: golds.count(label) for label in FALLACY_LABELS}
    for _ in range(trials):
        drawn = rng.choice(N_CLASSES, size=len(golds), p=probs)
        preds = [FALLACY_LABELS[i] for i in drawn]
        report = weighted_prf(confusion_matrix(golds, preds))
        sums += np.array([report.weighted_precision, report.weighted_recall,
                          report.weighted_f1, report.accuracy])
        for label in FALLACY_LABELS:
            stats = report.per_class[label]
            per_class_sums[label] += np.array(
                [stats["precision"], stats["recall"], stats["f1"]])
    means = sums / trials
    per_class = {
        label: {"precision": float(per_class_sums[label][0] / trials),
                "recall": float(per_class_sums[label][1] / trials),
                "f1": float(per_class_sums[label][2] / trials),
                "support": support[label]}
        for label in FALLACY_LABELS}
    return MetricsReport(
        weighted_precision=float(means[0]), weighted_recall=float(means[1]),
        weighted_f1=float(means[2]), accuracy=float(means[3]),
        per_class=per_class,
        config={"baseline": "frequency", "seed": seed, "trials": trials})


def evaluate_model(model: TrainedModel, testset: Sequence[Case],
                   db: CaseDatabase, memoize: bool = True) -> MetricsReport:
    """Forward every test case and score predictions against gold labels."""
    if not testset:
        raise ConfigError("test set is empty")
    if model.db_fingerprint and db.fingerprint() != model.db_fingerprint:
        logger.warning("database fingerprint differs from the one recorded "
                       "at train time; results are not comparable")
    runtime = ModelRuntime(model, db, memoize=memoize)
    golds, preds = [], []
    for case in testset:
        if case.label is None:
            raise ConfigError(f"test case {case.id!r} has no label")
        prediction, _ = runtime.forward(case)
        golds.append(case.label)
        preds.append(prediction.argmax)
    return weighted_prf(confusion_matrix(golds, preds),
                        config=model.config.to_dict(),
                        db_fingerprint=db.fingerprint())


def label_overlap(model: TrainedModel, testset: Sequence[Case],
                  db: CaseDatabase, k: int | None = None) -> OverlapReport:
    """How often retrieved neighbors carry the gold / predicted label.

    Per case, the overlap is the fraction of the k retrieved labels that
    match; the report averages those fractions over the test set.
    """
    if k is None:
        k = model.config.k
    if k == 0:
        raise ConfigError("overlap is undefined at k=0")
    if not testset:
        raise ConfigError("test set is empty")
    runtime = ModelRuntime(model, db)
    gold_fracs, pred_fracs = [], []
    for case in testset:
        hits = runtime.retrieval_hits(case, k)
        if not hits:
            raise ConfigError("database returned no hits; is it empty?")
        labels = [db.case_by_id(hit.case_id).label for hit in hits]
        prediction, _ = runtime.forward(case)
        gold_fracs.append(sum(l == case.label for l in labels) / len(hits))
        pred_fracs.append(sum(l == prediction.argmax for l in labels) / len(hits))
    return OverlapReport(
        ground_truth_overlap=float(np.mean(gold_fracs)),
        prediction_overlap=float(np.mean(pred_fracs)),
        k=k, representation=model.config.representation.value)


# ---------------------------------------------------------------------------
# Ablation sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationGrid:
    """Axes of the sweep; the cross product defines the cells."""

    ks: tuple[int, ...] = (1,)
    ratios: tuple[float, ...] = (0.1,)
    representations: tuple[RepresentationKind, ...] = (RepresentationKind.TEXT,)
    attention: tuple[bool, ...] = (True,)

    def __post_init__(self):
        for name in ("ks", "ratios", "representations", "attention"):
            if not getattr(self, name):
                raise ConfigError(f"grid axis {name} is empty")

    def cells(self) -> list[dict]:
        return [{"k": k, "ratio": ratio, "representation": rep,
                 "attention": att}
                for k, ratio, rep, att in product(
                    self.ks, self.ratios, self.representations, self.attention)]


def cases_fingerprint(cases: Sequence[Case]) -> str:
    digest = hashlib.sha256()
    for case in cases:
        digest.update(f"{case.id}\x00{case.text}\x00{case.label}\x01".encode())
    return digest.hexdigest()


def _cell_hash(cell_config: TrainConfig, db_fingerprint: str,
               train_fp: str, test_fp: str) -> str:
    payload = json.dumps([cell_config.to_dict(), db_fingerprint,
                          train_fp, test_fp], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def ablation_sweep(grid: AblationGrid, base_config: TrainConfig,
                   db: CaseDatabase, trainset: Sequence[Case],
                   testset: Sequence[Case], out_dir: str | Path,
                   token_spec: EncoderSpec | None = None,
                   retrieval_spec: EncoderSpec | None = None) -> list[dict]:
    """Train and evaluate one model per grid cell; resume by cell hash.

    Cell outputs land in ``out_dir/cells/<hash>.json``.  A cell whose
    output file already exists is served from disk, so deleting one file
    recomputes exactly that cell.  A flat ``sweep.csv`` is rewritten at
    the end from all cell reports.
    """
    out_dir = Path(out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    train_fp = cases_fingerprint(trainset)
    test_fp = cases_fingerprint(testset)

    rows = []
    for cell in grid.cells():
        config = replace(base_config, k=cell["k"], db_ratio=cell["ratio"],
                         representation=cell["representation"],
                         attention_enabled=cell["attention"])
        cell_db = subsample_database(db, cell["ratio"], base_config.seed)
        cell_id = _cell_hash(config, db.fingerprint(), train_fp, test_fp)
        cell_path = cells_dir / f"{cell_id}.json"
        if cell_path.exists():
            report = MetricsReport.load(cell_path)
            logger.info("cell %s served from cache", cell_id)
        else:
            model = train(config, cell_db, trainset,
                          token_spec=token_spec, retrieval_spec=retrieval_spec)
            report = evaluate_model(model, testset, cell_db)
            report.save(cell_path)
        rows.append({"cell": cell_id, "k": cell["k"], "ratio": cell["ratio"],
                     "representation": cell["representation"].value,
                     "attention": cell["attention"],
                     "precision": report.weighted_precision,
                     "recall": report.weighted_recall,
                     "f1": report.weighted_f1,
                     "accuracy": report.accuracy})

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=[
        "cell", "k", "ratio", "representation", "attention",
        "precision", "recall", "f1", "accuracy"])
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_text(out_dir / "sweep.csv", buffer.getvalue())
    return rows
