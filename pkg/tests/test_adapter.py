"""Cross-attention forward/backward against naive reimplementations."""

import numpy as np
import pytest

from fallacy_cbr.adapter import (
    AdapterParams,
    attention_backward,
    attention_forward,
    bypass_backward,
    bypass_forward,
)
from fallacy_cbr.encoders import EncodedSequence
from fallacy_cbr.errors import CacheError, ConfigError, DimError, MaskError


def _seq(states, mask=None):
    states = np.asarray(states, dtype=np.float64)
    if mask is None:
        mask = np.ones(states.shape[0], bool)
    return EncodedSequence(states=states, mask=np.asarray(mask, bool))


def _random_setup(seed, dim=8, heads=2, t_c=3, t_s=5, masked=()):
    rng = np.random.default_rng(seed)
    params = AdapterParams.init(dim, heads, rng)
    query = _seq(rng.normal(size=(t_c, dim)))
    mask = np.ones(t_s, bool)
    for j in masked:
        mask[j] = False
    memory = _seq(rng.normal(size=(t_s, dim)), mask)
    return params, query, memory


def _naive_attention(query, memory, params):
    """Slow per-head, per-row reference with explicit loops."""
    heads, _, head_dim = params.w_q.shape
    t_c, t_s = query.states.shape[0], memory.states.shape[0]
    concat = np.zeros((t_c, heads * head_dim))
    weights = np.zeros((heads, t_c, t_s))
    for h in range(heads):
        q = query.states @ params.w_q[h]
        k = memory.states @ params.w_k[h]
        v = memory.states @ params.w_v[h]
        for i in range(t_c):
            logits = np.full(t_s, -np.inf)
            for j in range(t_s):
                if memory.mask[j]:
                    logits[j] = (q[i] @ k[j]) / np.sqrt(head_dim)
            exp = np.exp(logits - logits[memory.mask].max())
            row = exp / exp.sum()
            weights[h, i] = row
            for j in range(t_s):
                concat[i, h * head_dim:(h + 1) * head_dim] += row[j] * v[j]
    return concat @ params.w_o, weights


class TestAdapterParams:
    def test_init_shapes_and_bounds(self):
        params = AdapterParams.init(12, 3, np.random.default_rng(0))
        assert params.w_q.shape == (3, 12, 4)
        assert params.w_o.shape == (12, 12)
        assert params.heads == 3 and params.dim == 12 and params.head_dim == 4
        bound = 1.0 / np.sqrt(12)
        for tensor in params.tensors().values():
            assert np.abs(tensor).max() <= bound

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            AdapterParams.init(10, 3, np.random.default_rng(0))

    def test_shape_validation(self):
        ok = np.zeros((2, 8, 4))
        with pytest.raises(DimError):
            AdapterParams(w_q=ok, w_k=ok, w_v=np.zeros((2, 8, 3)),
                          w_o=np.zeros((8, 8)))
        with pytest.raises(DimError):
            AdapterParams(w_q=ok, w_k=ok, w_v=ok, w_o=np.zeros((8, 4)))
        with pytest.raises(DimError):
            AdapterParams(w_q=np.zeros((2, 8, 3)), w_k=np.zeros((2, 8, 3)),
                          w_v=np.zeros((2, 8, 3)), w_o=np.zeros((8, 8)))

    def test_tensor_order(self):
        params = AdapterParams.init(8, 2, np.random.default_rng(0))
        assert list(params.tensors()) == ["w_q", "w_k", "w_v", "w_o"]

    def test_copy_is_independent(self):
        params = AdapterParams.init(8, 2, np.random.default_rng(0))
        clone = params.copy()
        clone.w_q[0, 0, 0] = 99.0
        assert params.w_q[0, 0, 0] != 99.0


class TestAttentionForward:
    @pytest.mark.parametrize("seed,heads,masked", [
        (0, 1, ()), (1, 2, ()), (2, 4, (1,)), (3, 8, (0, 4)),
    ])
    def test_matches_naive_reference(self, seed, heads, masked):
        params, query, memory = _random_setup(seed, dim=8, heads=heads,
                                              masked=masked)
        out = attention_forward(query, memory, params)
        expected_adapted, expected_weights = _naive_attention(
            query, memory, params)
        np.testing.assert_allclose(out.adapted, expected_adapted,
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(out.attention, expected_weights,
                                   rtol=1e-12, atol=1e-12)

    def test_rows_sum_to_one(self):
        params, query, memory = _random_setup(4, masked=(2,))
        out = attention_forward(query, memory, params)
        np.testing.assert_allclose(out.attention.sum(axis=-1), 1.0,
                                   rtol=0, atol=1e-12)

    def test_masked_keys_get_exact_zero(self):
        params, query, memory = _random_setup(5, t_s=6, masked=(1, 4))
        out = attention_forward(query, memory, params)
        assert (out.attention[:, :, 1] == 0.0).all()
        assert (out.attention[:, :, 4] == 0.0).all()

    def test_masked_values_never_contribute(self):
        params, query, memory = _random_setup(6, t_s=5, masked=(3,))
        out = attention_forward(query, memory, params)
        altered = memory.states.copy()
        altered[3] = 1e6
        out2 = attention_forward(query, _seq(altered, memory.mask), params)
        np.testing.assert_array_equal(out.adapted, out2.adapted)

    def test_single_head_identity_output_stays_in_value_envelope(self):
        rng = np.random.default_rng(7)
        dim = 6
        params = AdapterParams(
            w_q=rng.normal(size=(1, dim, dim)),
            w_k=rng.normal(size=(1, dim, dim)),
            w_v=rng.normal(size=(1, dim, dim)),
            w_o=np.eye(dim),
        )
        query = _seq(rng.normal(size=(3, dim)))
        memory = _seq(rng.normal(size=(5, dim)))
        out = attention_forward(query, memory, params)
        v = memory.states @ params.w_v[0]
        lo, hi = v.min(axis=0), v.max(axis=0)
        tiny = 1e-12
        assert (out.adapted >= lo - tiny).all()
        assert (out.adapted <= hi + tiny).all()

    def test_memory_permutation_is_bit_exact(self):
        params, query, memory = _random_setup(8, t_s=7)
        base = attention_forward(query, memory, params).adapted
        rng = np.random.default_rng(99)
        for _ in range(5):
            perm = rng.permutation(7)
            shuffled = _seq(memory.states[perm])
            again = attention_forward(query, shuffled, params).adapted
            assert base.tobytes() == again.tobytes()

    def test_single_key_closed_form(self):
        rng = np.random.default_rng(9)
        dim = 4
        params = AdapterParams.init(dim, 1, rng)
        query = _seq(rng.normal(size=(1, dim)))
        memory = _seq(rng.normal(size=(1, dim)))
        out = attention_forward(query, memory, params)
        np.testing.assert_allclose(out.attention, [[[1.0]]], rtol=0, atol=0)
        expected = (memory.states @ params.w_v[0]) @ params.w_o
        np.testing.assert_allclose(out.adapted, expected, rtol=1e-12, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        params, query, memory = _random_setup(0, dim=8)
        bad = _seq(np.ones((2, 4)))
        with pytest.raises(DimError):
            attention_forward(bad, memory, params)
        with pytest.raises(DimError):
            attention_forward(query, bad, params)

    def test_fully_masked_memory_rejected(self):
        # A sequence cannot normally be built with an all-false mask, so
        # force one to exercise the adapter's own guard.
        params, query, memory = _random_setup(0)
        object.__setattr__(memory, "mask", np.zeros(5, bool))
        with pytest.raises(MaskError):
            attention_forward(query, memory, params)
        with pytest.raises(MaskError):
            bypass_forward(memory)


def _fd_tensor_grad(loss, tensor, eps=1e-6):
    grad = np.zeros_like(tensor)
    it = np.nditer(tensor, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = tensor[idx]
        tensor[idx] = saved + eps
        up = loss()
        tensor[idx] = saved - eps
        down = loss()
        tensor[idx] = saved
        grad[idx] = (up - down) / (2.0 * eps)
        it.iternext()
    return grad


class TestAttentionBackward:
    @pytest.mark.parametrize("seed,heads,masked", [(0, 1, ()), (1, 2, (1,)),
                                                   (2, 3, ())])
    def test_gradients_match_finite_differences(self, seed, heads, masked):
        params, query, memory = _random_setup(seed, dim=6, heads=heads,
                                              t_c=2, t_s=4, masked=masked)
        rng = np.random.default_rng(seed + 100)
        g = rng.normal(size=(2, 6))

        out = attention_forward(query, memory, params)
        grads = attention_backward(g, out, params)

        def loss():
            fresh_q = _seq(query.states.copy(), query.mask)
            fresh_m = _seq(memory.states.copy(), memory.mask)
            return float((attention_forward(fresh_q, fresh_m, params)
                          .adapted * g).sum())

        for name, tensor in params.tensors().items():
            numeric = _fd_tensor_grad(loss, tensor)
            np.testing.assert_allclose(grads[name], numeric,
                                       rtol=1e-5, atol=1e-7, err_msg=name)
        numeric = _fd_tensor_grad(loss, query.states)
        np.testing.assert_allclose(grads["query_states"], numeric,
                                   rtol=1e-5, atol=1e-7)
        numeric = _fd_tensor_grad(loss, memory.states)
        np.testing.assert_allclose(grads["memory_states"], numeric,
                                   rtol=1e-5, atol=1e-7)

    def test_masked_memory_rows_get_zero_gradient(self):
        params, query, memory = _random_setup(3, t_s=5, masked=(0, 2))
        out = attention_forward(query, memory, params)
        grads = attention_backward(np.ones((3, 8)), out, params)
        np.testing.assert_array_equal(grads["memory_states"][0], 0.0)
        np.testing.assert_array_equal(grads["memory_states"][2], 0.0)

    def test_cache_tied_to_params_object(self):
        params, query, memory = _random_setup(0)
        out = attention_forward(query, memory, params)
        with pytest.raises(CacheError):
            attention_backward(np.ones((3, 8)), out, params.copy())

    def test_grad_shape_checked(self):
        params, query, memory = _random_setup(0)
        out = attention_forward(query, memory, params)
        with pytest.raises(DimError):
            attention_backward(np.ones((4, 8)), out, params)

    def test_bypass_output_rejected(self):
        params, _, memory = _random_setup(0)
        out = bypass_forward(memory)
        with pytest.raises(CacheError):
            attention_backward(np.ones((1, 8)), out, params)


class TestBypass:
    def test_masked_mean(self):
        states = np.array([[2.0, 4.0], [6.0, 8.0], [100.0, 100.0]])
        memory = _seq(states, [True, True, False])
        out = bypass_forward(memory)
        assert out.attention is None
        np.testing.assert_allclose(out.adapted, [[4.0, 6.0]])

    def test_backward_spreads_gradient(self):
        memory = _seq(np.ones((3, 2)), [True, False, True])
        out = bypass_forward(memory)
        grads = bypass_backward(np.array([[4.0, 8.0]]), out)
        np.testing.assert_allclose(grads["memory_states"],
                                   [[2.0, 4.0], [0.0, 0.0], [2.0, 4.0]])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        states = rng.normal(size=(4, 3))
        mask = np.array([True, False, True, True])
        g = rng.normal(size=(1, 3))
        out = bypass_forward(_seq(states, mask))
        grads = bypass_backward(g, out)

        def loss():
            return float((bypass_forward(_seq(states.copy(), mask))
                          .adapted * g).sum())

        numeric = _fd_tensor_grad(loss, states)
        np.testing.assert_allclose(grads["memory_states"], numeric,
                                   rtol=1e-6, atol=1e-9)

    def test_attention_backward_cache_mismatch(self):
        memory = _seq(np.ones((2, 4)))
        out = bypass_forward(memory)
        with pytest.raises(CacheError):
            bypass_backward(np.ones((1, 4)),
                            type(out)(adapted=out.adapted, attention=None,
                                      cache=None))
