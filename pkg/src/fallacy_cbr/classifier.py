"""Pooling, the two-layer gelu classifier head, and cross-entropy.

The classifier maps a pooled D-vector through one hidden layer with gelu
to 13 logits.  gelu uses the tanh approximation

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))

so independent implementations agree bit-for-bit within documented
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimError, MaskError, NumericsError
from .labels import FALLACY_LABELS, N_CLASSES, label_index

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    # Keeps float input dtypes (gradient checks pass long doubles through).
    x = np.asarray(x, dtype=np.result_type(np.asarray(x), np.float64))
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    tanh = np.tanh(inner)
    sech2 = 1.0 - tanh ** 2
    return 0.5 * (1.0 + tanh) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


@dataclass
class ClassifierParams:
    """Two dense layers: (D, Dh) + Dh bias, then (Dh, 13) + 13 bias."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0]:
            raise DimError("w1/b1 width mismatch")
        if self.w2.shape != (self.b1.shape[0], N_CLASSES):
            raise DimError(f"w2 must be ({self.b1.shape[0]}, {N_CLASSES})")
        if self.b2.shape != (N_CLASSES,):
            raise DimError(f"b2 must be ({N_CLASSES},)")

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, dim: int, hidden_dim: int | None,
             rng: np.random.Generator) -> "ClassifierParams":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        hidden = hidden_dim or dim
        if hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {hidden}")
        bound1 = 1.0 / np.sqrt(dim)
        bound2 = 1.0 / np.sqrt(hidden)
        return cls(
            w1=rng.uniform(-bound1, bound1, (dim, hidden)),
            b1=rng.uniform(-bound1, bound1, (hidden,)),
            w2=rng.uniform(-bound2, bound2, (hidden, N_CLASSES)),
            b2=rng.uniform(-bound2, bound2, (N_CLASSES,)),
        )

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.w1.copy(), self.b1.copy(),
                                self.w2.copy(), self.b2.copy())

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameter tensors in the documented update order."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass(frozen=True)
class Prediction:
    """Logits, softmax probabilities, and the argmax label."""

    logits: np.ndarray
    probs: np.ndarray
    argmax: str


def pool_adapted(adapted: np.ndarray, mask: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Reduce adapted rows to one vector: masked mean or first unmasked row."""
    mask = np.asarray(mask, dtype=bool)
    if adapted.shape[0] != mask.shape[0]:
        raise DimError("mask length must match row count")
    if not mask.any():
        raise MaskError("all query positions are masked; nothing to pool")
    if mode == "mean":
        return adapted[mask].mean(axis=0)
    if mode == "first":
        return adapted[int(np.argmax(mask))].copy()
    raise ConfigError(f"unknown pool mode: {mode!r}")


def pool_backward(grad_pooled: np.ndarray, mask: np.ndarray,
                  mode: str = "mean") -> np.ndarray:
    """Gradient of :func:`pool_adapted` w.r.t. the adapted rows."""
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros((mask.shape[0], grad_pooled.shape[0]))
    if mode == "mean":
        grad[mask] = grad_pooled / mask.sum()
    elif mode == "first":
        grad[int(np.argmax(mask))] = grad_pooled
    else:
        raise ConfigError(f"unknown pool mode: {mode!r}")
    return grad


def classify(x: np.ndarray, params: ClassifierParams) -> Prediction:
    """logits = W2 gelu(W1 x + b1) + b2, probabilities via stable softmax."""
    # Floats keep their precision (gradient checks feed long doubles
    # through here); anything else is promoted to float64.
    x = np.asarray(x, dtype=np.result_type(np.asarray(x), np.float64))
    if x.shape != (params.dim,):
        raise DimError(f"input must be ({params.dim},), got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericsError("classifier input contains non-finite values")
    hidden = x @ params.w1 + params.b1
    logits = gelu(hidden) @ params.w2 + params.b2
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return Prediction(logits=logits, probs=probs,
                      argmax=FALLACY_LABELS[int(np.argmax(probs))])


def classifier_backward(x: np.ndarray, params: ClassifierParams,
                        grad_logits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the classifier for an upstream logits gradient.

    Returns ({w1, b1, w2, b2}, grad_x).  The forward intermediates are
    recomputed; the head is cheap and this keeps calls stateless.
    """
    x = np.asarray(x, dtype=np.float64)
    hidden = x @ params.w1 + params.b1
    activated = gelu(hidden)
    grad_w2 = np.outer(activated, grad_logits)
    grad_b2 = grad_logits.copy()
    grad_activated = params.w2 @ grad_logits
    grad_hidden = grad_activated * gelu_grad(hidden)
    grad_w1 = np.outer(x, grad_hidden)
    grad_b1 = grad_hidden
    grad_x = params.w1 @ grad_hidden
    return ({"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2}, grad_x)


def cross_entropy(pred: Prediction, gold: str) -> tuple[float, np.ndarray]:
    """Negative log probability of the gold class and d loss / d logits.

    grad = probs - onehot(gold); it always sums to zero.
    """
    idx = label_index(gold)
    prob = pred.probs[idx]
    # probs come from a softmax, so prob > 0 unless logits diverged.  The
    # loss keeps the probability's precision rather than casting down.
    loss = -np.log(np.maximum(prob, np.finfo(np.float64).tiny))
    grad = pred.probs.copy()
    grad[idx] -= 1.0
    return loss, grad
