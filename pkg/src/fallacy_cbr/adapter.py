"""Multi-head cross-attention over retrieved-case states.

Queries come from the new case's token states, keys and values from the
retrieved-cases sequence.  Per head h with head width Dh = D/H:

    Q = E_C W_Q[h],  K = E_S W_K[h],  V = E_S W_V[h]
    weights = softmax(Q K^T / sqrt(Dh))   (masked keys get -inf logits)
    head_h  = weights V

Head outputs are concatenated and projected by W_O.  The backward pass
is hand-derived reverse mode and is exact up to floating point; it also
returns input-state gradients for diagnostics even though encoders stay
frozen.  No dropout and no bias terms anywhere, so gradient checks are
clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EncodedSequence
from .errors import CacheError, ConfigError, DimError, MaskError


@dataclass
class AdapterParams:
    """Per-head Q/K/V projections (H, D, D/H) and output projection (D, D)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        if self.w_q.ndim != 3 or self.w_q.shape != self.w_k.shape \
                or self.w_q.shape != self.w_v.shape:
            raise DimError("w_q/w_k/w_v must share shape (H, D, D/H)")
        heads, dim, head_dim = self.w_q.shape
        if heads * head_dim != dim:
            raise DimError(f"D={dim} not divisible into {heads} heads of {head_dim}")
        if self.w_o.shape != (dim, dim):
            raise DimError(f"w_o must be ({dim}, {dim}), got {self.w_o.shape}")

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator) -> "AdapterParams":
        """Seeded uniform init in [-1/sqrt(D), +1/sqrt(D)]."""
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} must be divisible by heads {heads}")
        head_dim = dim // heads
        bound = 1.0 / np.sqrt(dim)
        shape = (heads, dim, head_dim)
        return cls(
            w_q=rng.uniform(-bound, bound, shape),
            w_k=rng.uniform(-bound, bound, shape),
            w_v=rng.uniform(-bound, bound, shape),
            w_o=rng.uniform(-bound, bound, (dim, dim)),
        )

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.w_q.copy(), self.w_k.copy(),
                             self.w_v.copy(), self.w_o.copy())

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameter tensors in the documented update order."""
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class _AttentionCache:
    params_id: int
    query_states: np.ndarray
    memory_states: np.ndarray
    memory_mask: np.ndarray
    q: np.ndarray        # (H, T_C, Dh)
    k: np.ndarray        # (H, T_S, Dh)
    v: np.ndarray        # (H, T_S, Dh)
    weights: np.ndarray  # (H, T_C, T_S)
    concat: np.ndarray   # (T_C, D)


@dataclass
class _BypassCache:
    memory_mask: np.ndarray


@dataclass
class AdaptedOutput:
    """Adapted states (T_C, D), per-head attention weights, forward cache."""

    adapted: np.ndarray
    attention: np.ndarray | None
    cache: object | None = None


def attention_forward(query_seq: EncodedSequence, memory_seq: EncodedSequence,
                      params: AdapterParams) -> AdaptedOutput:
    """Scaled dot-product cross-attention with key masking.

    Masked memory positions receive -inf logits, so their softmax weight
    is exactly zero.  Every attention row sums to one over the unmasked
    keys.
    """
    if query_seq.dim != params.dim or memory_seq.dim != params.dim:
        raise DimError(
            f"state dim {query_seq.dim}/{memory_seq.dim} != params dim {params.dim}")
    if not memory_seq.mask.any():
        raise MaskError("all memory positions are masked")

    e_c, e_s = query_seq.states, memory_seq.states
    scale = 1.0 / np.sqrt(params.head_dim)

    # (H, T, Dh) batched projections.
    q = np.einsum("td,hdk->htk", e_c, params.w_q)
    k = np.einsum("td,hdk->htk", e_s, params.w_k)
    v = np.einsum("td,hdk->htk", e_s, params.w_v)

    logits = np.einsum("hqk,hmk->hqm", q, k) * scale
    logits = np.where(memory_seq.mask[None, None, :], logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    exp = np.exp(logits)
    # Reductions over the memory axis run in sorted order, so permuting
    # key/value rows reproduces the output bit for bit, not just to
    # rounding error.
    weights = exp / np.sort(exp, axis=-1).sum(axis=-1, keepdims=True)

    products = weights[:, :, :, None] * v[:, None, :, :]
    heads_out = np.sort(products, axis=2).sum(axis=2)
    concat = heads_out.transpose(1, 0, 2).reshape(e_c.shape[0], params.dim)
    adapted = concat @ params.w_o

    cache = _AttentionCache(
        params_id=id(params), query_states=e_c, memory_states=e_s,
        memory_mask=memory_seq.mask, q=q, k=k, v=v, weights=weights,
        concat=concat)
    return AdaptedOutput(adapted=adapted, attention=weights, cache=cache)


def attention_backward(grad_adapted: np.ndarray, out: AdaptedOutput,
                       params: AdapterParams) -> dict[str, np.ndarray]:
    """Exact gradients of the forward map for all projections and inputs.

    Returns a dict with keys w_q, w_k, w_v, w_o, query_states,
    memory_states.  The cache must come from a forward call made with the
    same params object.
    """
    cache = out.cache
    if not isinstance(cache, _AttentionCache):
        raise CacheError("output has no attention cache (bypass mode?)")
    if cache.params_id != id(params):
        raise CacheError("cache was produced with different parameters")
    grad_adapted = np.asarray(grad_adapted, dtype=np.float64)
    t_c = cache.query_states.shape[0]
    if grad_adapted.shape != (t_c, params.dim):
        raise DimError(f"grad must be ({t_c}, {params.dim}), got {grad_adapted.shape}")

    scale = 1.0 / np.sqrt(params.head_dim)

    grad_w_o = cache.concat.T @ grad_adapted
    grad_concat = grad_adapted @ params.w_o.T
    grad_heads = grad_concat.reshape(t_c, params.heads, params.head_dim) \
        .transpose(1, 0, 2)

    grad_v = np.einsum("hqm,hqk->hmk", cache.weights, grad_heads)
    grad_weights = np.einsum("hqk,hmk->hqm", grad_heads, cache.v)

    # Row-wise softmax backward; masked columns carry zero weight, so the
    # correction term never leaks gradient into them.
    inner = (grad_weights * cache.weights).sum(axis=-1, keepdims=True)
    grad_logits = cache.weights * (grad_weights - inner)

    grad_q = np.einsum("hqm,hmk->hqk", grad_logits, cache.k) * scale
    grad_k = np.einsum("hqm,hqk->hmk", grad_logits, cache.q) * scale

    grad_w_q = np.einsum("td,htk->hdk", cache.query_states, grad_q)
    grad_w_k = np.einsum("td,htk->hdk", cache.memory_states, grad_k)
    grad_w_v = np.einsum("td,htk->hdk", cache.memory_states, grad_v)

    grad_query = np.einsum("htk,hdk->td", grad_q, params.w_q)
    grad_memory = np.einsum("htk,hdk->td", grad_k, params.w_k) \
        + np.einsum("htk,hdk->td", grad_v, params.w_v)

    return {"w_q": grad_w_q, "w_k": grad_w_k, "w_v": grad_w_v, "w_o": grad_w_o,
            "query_states": grad_query, "memory_states": grad_memory}


def bypass_forward(memory_seq: EncodedSequence) -> AdaptedOutput:
    """Attention-disabled path: masked mean over memory states.

    The single pooled row goes straight to the classifier, so this run
    configuration measures the model without its attention component.
    """
    if not memory_seq.mask.any():
        raise MaskError("all memory positions are masked")
    pooled = memory_seq.states[memory_seq.mask].mean(axis=0, keepdims=True)
    return AdaptedOutput(adapted=pooled, attention=None,
                         cache=_BypassCache(memory_mask=memory_seq.mask))


def bypass_backward(grad_adapted: np.ndarray, out: AdaptedOutput) -> dict[str, np.ndarray]:
    """Memory-state gradients of the bypass mean; adapter params get none."""
    cache = out.cache
    if not isinstance(cache, _BypassCache):
        raise CacheError("output has no bypass cache")
    grad_adapted = np.asarray(grad_adapted, dtype=np.float64)
    mask = cache.memory_mask
    grad_memory = np.zeros((mask.shape[0], grad_adapted.shape[1]))
    grad_memory[mask] = grad_adapted[0] / mask.sum()
    return {"memory_states": grad_memory}
