"""End-to-end training of adapter + classifier over retrieval-composed inputs.

Encoders and the retrieval index are frozen: their outputs are pure
functions of the inputs, so per-example encodings and retrieved hits are
computed once and memoized.  Only the attention projections and the
classifier head receive gradient updates.  Everything is seeded, so one
(config, data, seed) triple always produces the same checkpoint bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adapter import (
    AdaptedOutput,
    AdapterParams,
    attention_backward,
    attention_forward,
    bypass_backward,
    bypass_forward,
)
from .classifier import (
    ClassifierParams,
    Prediction,
    classifier_backward,
    classify,
    cross_entropy,
    pool_adapted,
    pool_backward,
)
from .corpus import Case, CaseDatabase, build_case_database
from .encoders import (
    EncodedSequence,
    EncoderSpec,
    FileBackedEncoder,
    SEP_TOKEN,
    make_encoder,
)
from .errors import ConfigError, FormatError, NumericsError
from .labels import RepresentationKind
from .retriever import RetrievalHit, compose_case_string, retrieve_top_k

logger = logging.getLogger(__name__)

MAX_K = 5

CHECKPOINT_MAGIC = b"CBRM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters plus the seed that fixes every random draw."""

    k: int = 1
    db_ratio: float = 0.1
    representation: RepresentationKind = RepresentationKind.TEXT
    heads: int = 8
    dim: int = 64
    hidden_dim: int | None = None
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    attention_enabled: bool = True
    pool: str = "mean"
    sep_between_cases: bool = False

    def __post_init__(self):
        if not 0 <= self.k <= MAX_K:
            raise ConfigError(f"k must be in 0..{MAX_K}, got {self.k}")
        if not 0.0 < self.db_ratio <= 1.0:
            raise ConfigError(f"db_ratio must be in (0, 1], got {self.db_ratio}")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError(
                f"dim {self.dim} must be positive and divisible by heads {self.heads}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.pool not in ("mean", "first"):
            raise ConfigError(f"pool must be mean or first, got {self.pool!r}")
        if not isinstance(self.representation, RepresentationKind):
            object.__setattr__(self, "representation",
                               RepresentationKind(self.representation))

    def to_dict(self) -> dict:
        obj = {f: getattr(self, f) for f in self.__dataclass_fields__}
        obj["representation"] = self.representation.value
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["representation"] = RepresentationKind(obj["representation"])
        return cls(**obj)


@dataclass
class TrainedModel:
    """Trained parameters plus everything needed to reproduce them."""

    adapter: AdapterParams
    classifier: ClassifierParams
    config: TrainConfig
    token_spec: EncoderSpec
    retrieval_spec: EncoderSpec
    db_fingerprint: str = ""
    history: list[dict] = field(default_factory=list)


@dataclass
class ForwardCache:
    """Intermediates from one forward pass, kept for backward and analysis."""

    query_seq: EncodedSequence
    memory_seq: EncodedSequence
    adapter_out: AdaptedOutput
    pool_mask: np.ndarray
    pooled: np.ndarray
    hits: tuple[RetrievalHit, ...]
    prediction: Prediction


class ModelRuntime:
    """Binds a model to a database and memoizes everything frozen.

    Retrieval hits and encoded sequences depend only on (case, database,
    encoder specs), never on trainable parameters, so they are computed
    once per case id and reused across epochs and finite-difference
    evaluations.
    """

    def __init__(self, model: TrainedModel, db: CaseDatabase,
                 memoize: bool = True):
        self.model = model
        self.db = db
        self.memoize = memoize
        self.token_encoder = make_encoder(model.token_spec)
        self.sentence_encoder = make_encoder(model.retrieval_spec)
        if self.token_encoder.dim != model.config.dim:
            raise ConfigError(
                f"token encoder dim {self.token_encoder.dim} != config dim "
                f"{model.config.dim}")
        self._sequences: dict[str, tuple[EncodedSequence, EncodedSequence,
                                         tuple[RetrievalHit, ...]]] = {}

    # -- representation helpers -------------------------------------------

    def _kind_for(self, case: Case) -> RepresentationKind:
        kind = self.model.config.representation
        if kind is not RepresentationKind.TEXT and not case.has(kind):
            logger.warning("case %s has no %s enrichment; falling back to text",
                           case.id, kind.value)
            return RepresentationKind.TEXT
        return kind

    def _sentence_key(self, case: Case, kind: RepresentationKind) -> str:
        if isinstance(self.sentence_encoder, FileBackedEncoder):
            return f"{case.id}#{kind.value}"
        return case.represent(kind)

    def _token_key(self, case: Case, kind: RepresentationKind) -> str:
        if isinstance(self.token_encoder, FileBackedEncoder):
            return f"{case.id}#{kind.value}"
        return case.represent(kind)

    def _encode_memory(self, query_seq: EncodedSequence, query_case: Case,
                       kind: RepresentationKind,
                       hits: Sequence[RetrievalHit]) -> EncodedSequence:
        """Encode the query-plus-similar-cases sequence.

        The text-capable encoder encodes the composed string directly.  A
        file-backed encoder concatenates the stored matrices with the
        reserved separator row in the matching positions.
        """
        config = self.model.config
        hit_cases = [self.db.case_by_id(hit.case_id) for hit in hits]
        wanted = config.representation
        if not isinstance(self.token_encoder, FileBackedEncoder):
            composed = compose_case_string(
                query_case.represent(kind),
                [self._db_repr(c, wanted) for c in hit_cases],
                sep=SEP_TOKEN, sep_between=config.sep_between_cases, hits=hits)
            return self.token_encoder.encode_tokens(composed.similars_text)

        sep_row = self.token_encoder.sep_vector[None, :]
        blocks = [query_seq.states]
        for i, hit_case in enumerate(hit_cases):
            if i == 0 or config.sep_between_cases:
                blocks.append(sep_row)
            hit_kind = wanted if hit_case.has(wanted) else RepresentationKind.TEXT
            blocks.append(self.token_encoder.encode_tokens(
                self._token_key(hit_case, hit_kind)).states)
        states = np.vstack(blocks)
        return EncodedSequence(states=states, mask=np.ones(states.shape[0], bool))

    def _db_repr(self, case: Case, kind: RepresentationKind) -> str:
        return case.represent(kind) if case.has(kind) else case.text

    # -- forward / backward ------------------------------------------------

    def retrieval_hits(self, case: Case, k: int) -> tuple[RetrievalHit, ...]:
        """Top-k neighbors of a case under the configured representation."""
        kind = self._kind_for(case)
        query_vec = self.sentence_encoder.sentence_embedding(
            self._sentence_key(case, kind))
        return tuple(retrieve_top_k(
            self.db, self.model.config.representation, query_vec, k,
            exclude_id=case.id))

    def sequences_for(self, case: Case) -> tuple[EncodedSequence, EncodedSequence,
                                                 tuple[RetrievalHit, ...]]:
        """(E_C, E_S, hits) for a case; memoized by case id."""
        if self.memoize and case.id in self._sequences:
            return self._sequences[case.id]
        config = self.model.config
        kind = self._kind_for(case)
        query_seq = self.token_encoder.encode_tokens(self._token_key(case, kind))
        if config.k == 0:
            hits: tuple[RetrievalHit, ...] = ()
            memory_seq = query_seq
        else:
            hits = self.retrieval_hits(case, config.k)
            memory_seq = self._encode_memory(query_seq, case, kind, hits)
        result = (query_seq, memory_seq, hits)
        if self.memoize:
            self._sequences[case.id] = result
        return result

    def forward(self, case: Case) -> tuple[Prediction, ForwardCache]:
        query_seq, memory_seq, hits = self.sequences_for(case)
        config = self.model.config
        if config.attention_enabled:
            out = attention_forward(query_seq, memory_seq, self.model.adapter)
            pool_mask = query_seq.mask
        else:
            out = bypass_forward(memory_seq)
            pool_mask = np.ones(1, bool)
        pooled = pool_adapted(out.adapted, pool_mask, config.pool)
        prediction = classify(pooled, self.model.classifier)
        cache = ForwardCache(query_seq=query_seq, memory_seq=memory_seq,
                             adapter_out=out, pool_mask=pool_mask,
                             pooled=pooled, hits=hits, prediction=prediction)
        return prediction, cache

    def loss_and_grads(self, case: Case) -> tuple[float, Prediction,
                                                  dict[str, np.ndarray]]:
        """Cross-entropy loss and gradients for every trainable tensor."""
        if case.label is None:
            raise ConfigError(f"case {case.id!r} has no label; cannot train on it")
        prediction, cache = self.forward(case)
        loss, grad_logits = cross_entropy(prediction, case.label)
        cls_grads, grad_pooled = classifier_backward(
            cache.pooled, self.model.classifier, grad_logits)
        grad_adapted = pool_backward(grad_pooled, cache.pool_mask,
                                     self.model.config.pool)
        grads = dict()
        if self.model.config.attention_enabled:
            att_grads = attention_backward(grad_adapted, cache.adapter_out,
                                           self.model.adapter)
            for name in ("w_q", "w_k", "w_v", "w_o"):
                grads[name] = att_grads[name]
        else:
            for name, tensor in self.model.adapter.tensors().items():
                grads[name] = np.zeros_like(tensor)
        grads.update(cls_grads)
        return loss, prediction, grads


def forward_example(model: TrainedModel, case: Case,
                    db: CaseDatabase) -> tuple[Prediction, ForwardCache]:
    """One-shot pipeline run: retrieve, compose, adapt, pool, classify."""
    return ModelRuntime(model, db).forward(case)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moment accumulators and the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: TrainConfig) -> None:
    """Update parameters in place, in the dict's (documented) order.

    Adam uses bias-corrected first/second moments; sgd subtracts
    lr * grad.  Non-finite gradients abort with the tensor's name.
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericsError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        grad = grads[name]
        if config.optimizer == "sgd":
            tensor -= config.learning_rate * grad
            continue
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        tensor -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)


def _all_tensors(model: TrainedModel) -> dict[str, np.ndarray]:
    tensors = dict(model.adapter.tensors())
    tensors.update(model.classifier.tensors())
    return tensors


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def init_model(config: TrainConfig, token_spec: EncoderSpec | None = None,
               retrieval_spec: EncoderSpec | None = None,
               db_fingerprint: str = "") -> TrainedModel:
    """Seeded parameter initialization for the given configuration."""
    token_spec = token_spec or EncoderSpec(dim=config.dim)
    retrieval_spec = retrieval_spec or token_spec
    rng = np.random.default_rng(config.seed)
    adapter = AdapterParams.init(config.dim, config.heads, rng)
    classifier = ClassifierParams.init(config.dim, config.hidden_dim, rng)
    return TrainedModel(adapter=adapter, classifier=classifier, config=config,
                        token_spec=token_spec, retrieval_spec=retrieval_spec,
                        db_fingerprint=db_fingerprint, history=[])


def train(config: TrainConfig, db: CaseDatabase, trainset: Sequence[Case],
          token_spec: EncoderSpec | None = None,
          retrieval_spec: EncoderSpec | None = None,
          memoize: bool = True) -> TrainedModel:
    """Train adapter + classifier; encoders and retrieval stay frozen.

    ``db`` must already be subsampled to ``config.db_ratio``.  Shuffling,
    initialization, and every stochastic choice derive from
    ``config.seed``, so identical inputs give identical models.
    """
    if not trainset:
        raise ConfigError("trainset is empty")
    for case in trainset:
        if case.label is None:
            raise ConfigError(f"train case {case.id!r} has no label")
    model = init_model(config, token_spec, retrieval_spec,
                       db_fingerprint=db.fingerprint())
    runtime = ModelRuntime(model, db, memoize=memoize)
    params = _all_tensors(model)
    state = OptimizerState.for_params(params)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    n = len(trainset)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch = [trainset[i] for i in order[start:start + config.batch_size]]
            batch_grads = {name: np.zeros_like(p) for name, p in params.items()}
            for case in batch:
                loss, prediction, grads = runtime.loss_and_grads(case)
                epoch_loss += loss
                correct += prediction.argmax == case.label
                for name in batch_grads:
                    batch_grads[name] += grads[name]
            for name in batch_grads:
                batch_grads[name] /= len(batch)
            optimizer_step(params, batch_grads, state, config)
        mean_loss = float(epoch_loss) / n
        if not np.isfinite(mean_loss):
            raise NumericsError(f"mean loss diverged at epoch {epoch}")
        model.history.append({"epoch": epoch, "loss": mean_loss,
                              "accuracy": correct / n})
    return model


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def max_relative_fd_error(loss_fn: Callable[[], float],
                          tensors: dict[str, np.ndarray],
                          analytic: dict[str, np.ndarray],
                          eps: float = 1e-5) -> float:
    """Central-difference check of ``analytic`` against ``loss_fn``.

    Perturbs every entry of every tensor in place by +-eps and reports
    max over entries of |analytic - numeric| / max(1e-8, |numeric|).
    """
    worst = 0.0
    for name, tensor in tensors.items():
        grad = analytic[name]
        flat = tensor.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.shape[0]):
            original = flat[i]
            flat[i] = original + eps
            loss_plus = loss_fn()
            flat[i] = original - eps
            loss_minus = loss_fn()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            error = abs(grad_flat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, error)
    return worst


def finite_difference_check(model: TrainedModel, case: Case, db: CaseDatabase,
                            eps: float = 1e-5) -> float:
    """Check analytic gradients of the full example loss numerically.

    Covers every adapter and classifier parameter entry.  Retrieval and
    encoding do not depend on the parameters, so they are computed once.
    The numeric side evaluates the loss in extended precision: the
    difference of two nearly equal float64 losses carries ~1e-11 of
    cancellation noise, which would swamp entries whose true gradient is
    below ~1e-7 even though the backward formulas are exact.
    """
    runtime = ModelRuntime(model, db)
    _, _, analytic = runtime.loss_and_grads(case)

    widened = TrainedModel(
        adapter=AdapterParams(**{name: tensor.astype(np.longdouble)
                                 for name, tensor in model.adapter.tensors().items()}),
        classifier=ClassifierParams(**{name: tensor.astype(np.longdouble)
                                       for name, tensor in model.classifier.tensors().items()}),
        config=model.config, token_spec=model.token_spec,
        retrieval_spec=model.retrieval_spec)
    widened_runtime = ModelRuntime(widened, db)

    def loss_fn():
        prediction, _ = widened_runtime.forward(case)
        loss, _ = cross_entropy(prediction, case.label)
        return loss

    return max_relative_fd_error(loss_fn, _all_tensors(widened), analytic, eps)


def random_probe_setup(seed: int, dim: int = 16, heads: int = 2, k: int = 1,
                       attention_enabled: bool = True, pool: str = "mean",
                       max_tokens: int = 6) -> tuple[TrainedModel, Case, CaseDatabase]:
    """A small random model, query case, and database for gradient checks."""
    rng = np.random.default_rng(seed)
    vocab = ["arg", "claim", "cause", "vote", "tax", "rain", "game", "city",
             "team", "plan", "risk", "fact", "poll", "law", "food", "bird"]
    labels = ["ad_hominem", "false_causality", "faulty_generalization"]

    def random_text() -> str:
        count = int(rng.integers(2, max_tokens + 1))
        return " ".join(vocab[int(rng.integers(0, len(vocab)))]
                        for _ in range(count))

    config = TrainConfig(k=k, db_ratio=1.0, dim=dim, heads=heads,
                         attention_enabled=attention_enabled, pool=pool,
                         seed=seed, epochs=0)
    spec = EncoderSpec(dim=dim, seed=0)
    model = init_model(config, spec, spec)
    db_cases = [Case(id=f"db-{i}", text=random_text(),
                     label=labels[i % len(labels)]) for i in range(5)]
    db = build_case_database(db_cases, make_encoder(spec),
                             kinds=(RepresentationKind.TEXT,))
    query = Case(id="probe", text=random_text(),
                 label=labels[int(rng.integers(0, len(labels)))])
    return model, query, db


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "CBRM" | u32 version=1 | u32 meta_len | meta JSON
#   u32 tensor_count | per tensor:
#     u32 name_len | name | u32 ndim | ndim*u32 shape | f32 data
#   u32 fingerprint_len | fingerprint (UTF-8)

def _meta_json(model: TrainedModel) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "token_spec": model.token_spec.to_dict(),
        "retrieval_spec": model.retrieval_spec.to_dict(),
        "history": model.history,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: TrainedModel) -> bytes:
    """Serialize a model; identical models produce identical bytes."""
    meta = _meta_json(model)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)),
             meta]
    tensors = _all_tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.astype("<f4").tobytes())
    fingerprint = model.db_fingerprint.encode("utf-8")
    parts.append(struct.pack("<I", len(fingerprint)))
    parts.append(fingerprint)
    return b"".join(parts)


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such checkpoint: {path}")
    data = path.read_bytes()
    view = memoryview(data)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
    config = TrainConfig.from_dict(meta["config"])
    token_spec = EncoderSpec.from_dict(meta["token_spec"])
    retrieval_spec = EncoderSpec.from_dict(meta["retrieval_spec"])

    (tensor_count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(tensor_count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "tensor rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        size = int(np.prod(shape)) if shape else 1
        raw = take(4 * size, f"tensor {name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape) \
            .astype(np.float64)
    (fp_len,) = struct.unpack("<I", take(4, "fingerprint length"))
    fingerprint = bytes(take(fp_len, "fingerprint")).decode("utf-8")
    if offset != len(view):
        raise FormatError("trailing bytes after checkpoint payload")

    try:
        adapter = AdapterParams(tensors["w_q"], tensors["w_k"],
                                tensors["w_v"], tensors["w_o"])
        classifier = ClassifierParams(tensors["w1"], tensors["b1"],
                                      tensors["w2"], tensors["b2"])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing tensor {exc}") from None
    return TrainedModel(adapter=adapter, classifier=classifier, config=config,
                        token_spec=token_spec, retrieval_spec=retrieval_spec,
                        db_fingerprint=fingerprint, history=meta["history"])
