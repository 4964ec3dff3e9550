"""Training loop, optimizers, gradient checking, and checkpoints."""

import logging

import numpy as np
import pytest

from toydata import make_toy_cases
from fallacy_cbr.corpus import Case, build_case_database
from fallacy_cbr.encoders import (
    EncoderSpec,
    SEP_TOKEN,
    make_encoder,
    write_embedding_file,
)
from fallacy_cbr.errors import ConfigError, FormatError, NumericsError
from fallacy_cbr.labels import RepresentationKind
from fallacy_cbr.retriever import compose_case_string
from fallacy_cbr.training import (
    MAX_K,
    ModelRuntime,
    OptimizerState,
    TrainConfig,
    checkpoint_bytes,
    finite_difference_check,
    forward_example,
    init_model,
    load_checkpoint,
    max_relative_fd_error,
    optimizer_step,
    random_probe_setup,
    save_checkpoint,
    train,
)

TEXT = RepresentationKind.TEXT


def _toy_db(cases, dim=32, kinds=(TEXT,)):
    return build_case_database(cases, make_encoder(EncoderSpec(dim=dim)),
                               kinds=kinds)


def _small_config(**overrides):
    settings = dict(k=1, db_ratio=1.0, dim=32, heads=2, epochs=0, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrainConfig:
    def test_round_trip(self):
        config = _small_config(representation=RepresentationKind.GOALS,
                               hidden_dim=17, optimizer="sgd")
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_representation_string_coerced(self):
        config = TrainConfig(representation="goals")
        assert config.representation is RepresentationKind.GOALS

    @pytest.mark.parametrize("bad", [
        dict(k=-1), dict(k=MAX_K + 1), dict(db_ratio=0.0), dict(db_ratio=1.5),
        dict(dim=30, heads=4), dict(dim=0), dict(epochs=-1),
        dict(batch_size=0), dict(learning_rate=0.0),
        dict(optimizer="rmsprop"), dict(pool="max"),
    ])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


class TestInitModel:
    def test_seed_determinism(self):
        a = init_model(_small_config())
        b = init_model(_small_config())
        for name, tensor in {**a.adapter.tensors(),
                             **a.classifier.tensors()}.items():
            np.testing.assert_array_equal(
                tensor, {**b.adapter.tensors(), **b.classifier.tensors()}[name])
        c = init_model(_small_config(seed=1))
        assert not np.array_equal(a.adapter.w_q, c.adapter.w_q)

    def test_default_specs(self):
        model = init_model(_small_config(dim=16, heads=2))
        assert model.token_spec.dim == 16
        assert model.retrieval_spec == model.token_spec
        assert model.history == []


@pytest.fixture(scope="module")
def toy():
    cases = make_toy_cases(per_class=4)
    return cases, _toy_db(cases)


class TestModelRuntime:
    def test_forward_shapes(self, toy):
        cases, db = toy
        model = init_model(_small_config())
        prediction, cache = forward_example(model, cases[0], db)
        assert prediction.probs.shape == (13,)
        assert len(cache.hits) == 1
        assert cache.adapter_out.adapted.shape[1] == 32

    def test_encoder_dim_must_match_config(self, toy):
        _, db = toy
        model = init_model(_small_config(), token_spec=EncoderSpec(dim=16))
        with pytest.raises(ConfigError, match="dim"):
            ModelRuntime(model, db)

    def test_k_zero_uses_query_as_memory(self, toy):
        cases, db = toy
        model = init_model(_small_config(k=0))
        runtime = ModelRuntime(model, db)
        query_seq, memory_seq, hits = runtime.sequences_for(cases[0])
        assert hits == ()
        assert memory_seq is query_seq

    def test_memory_is_encoding_of_composed_string(self, toy):
        cases, db = toy
        model = init_model(_small_config(k=2))
        runtime = ModelRuntime(model, db)
        query = cases[0]
        query_seq, memory_seq, hits = runtime.sequences_for(query)
        similars = [db.case_by_id(h.case_id).text for h in hits]
        composed = compose_case_string(query.text, similars)
        expected = runtime.token_encoder.encode_tokens(composed.similars_text)
        np.testing.assert_array_equal(memory_seq.states, expected.states)

    def test_sep_between_layout(self, toy):
        cases, db = toy
        model = init_model(_small_config(k=2, sep_between_cases=True))
        runtime = ModelRuntime(model, db)
        query = cases[0]
        _, memory_seq, hits = runtime.sequences_for(query)
        similars = [db.case_by_id(h.case_id).text for h in hits]
        composed = compose_case_string(query.text, similars, sep_between=True)
        expected = runtime.token_encoder.encode_tokens(composed.similars_text)
        np.testing.assert_array_equal(memory_seq.states, expected.states)

    def test_query_never_retrieves_itself(self, toy):
        cases, db = toy
        model = init_model(_small_config(k=5))
        runtime = ModelRuntime(model, db)
        for case in cases:
            hits = runtime.retrieval_hits(case, 5)
            assert case.id not in [h.case_id for h in hits]

    def test_missing_representation_falls_back(self, toy, caplog):
        cases, db_plain = toy
        db = _toy_db(cases, kinds=(TEXT, RepresentationKind.GOALS))
        model = init_model(_small_config(
            representation=RepresentationKind.GOALS))
        runtime = ModelRuntime(model, db)
        with caplog.at_level(logging.WARNING, logger="fallacy_cbr.training"):
            query_seq, _, _ = runtime.sequences_for(cases[0])
        assert any("falling back" in r.message for r in caplog.records)
        expected = runtime.token_encoder.encode_tokens(cases[0].text)
        np.testing.assert_array_equal(query_seq.states, expected.states)

    def test_memoization(self, toy):
        cases, db = toy
        model = init_model(_small_config())
        runtime = ModelRuntime(model, db)
        first = runtime.sequences_for(cases[0])
        assert runtime.sequences_for(cases[0]) is first
        plain = ModelRuntime(model, db, memoize=False)
        assert plain.sequences_for(cases[0]) is not plain.sequences_for(cases[0])

    def test_unlabeled_case_cannot_train(self, toy):
        _, db = toy
        model = init_model(_small_config())
        runtime = ModelRuntime(model, db)
        with pytest.raises(ConfigError, match="no label"):
            runtime.loss_and_grads(Case(id="u", text="some words"))

    def test_bypass_gives_zero_adapter_grads(self, toy):
        cases, db = toy
        model = init_model(_small_config(attention_enabled=False))
        runtime = ModelRuntime(model, db)
        loss, _, grads = runtime.loss_and_grads(cases[0])
        assert loss > 0
        for name in ("w_q", "w_k", "w_v", "w_o"):
            np.testing.assert_array_equal(grads[name], 0.0)
        assert np.abs(grads["w2"]).max() > 0

    def test_grads_cover_all_tensors_in_order(self, toy):
        cases, db = toy
        model = init_model(_small_config())
        runtime = ModelRuntime(model, db)
        _, _, grads = runtime.loss_and_grads(cases[0])
        assert list(grads) == ["w_q", "w_k", "w_v", "w_o",
                               "w1", "b1", "w2", "b2"]


class TestFileBackedRuntime:
    def test_memory_concatenates_stored_blocks(self, tmp_path):
        dim = 8
        rng = np.random.default_rng(0)
        cases = [Case(id=f"c{i}", text=f"case {i}", label="ad_hominem")
                 for i in range(3)]
        stored = {}
        records = []
        for case in cases:
            states = rng.normal(size=(int(rng.integers(2, 5)), dim))
            vec = rng.normal(size=dim)
            vec /= np.linalg.norm(vec)
            stored[case.id] = states
            records.append((f"{case.id}#text", states, vec))
        path = tmp_path / "emb.bin"
        write_embedding_file(path, dim=dim, records=records)

        spec = EncoderSpec(variant="file_backed", dim=dim, path=str(path))
        encoder = make_encoder(spec)
        db = build_case_database(cases, encoder)
        config = TrainConfig(k=2, db_ratio=1.0, dim=dim, heads=2, epochs=0)
        model = init_model(config, spec, spec)
        runtime = ModelRuntime(model, db)

        query = cases[0]
        query_seq, memory_seq, hits = runtime.sequences_for(query)
        # The file format stores float32, so compare against what the
        # store actually holds, not the float64 originals.
        served = {case.id: encoder.store.records[f"{case.id}#text"][0]
                  for case in cases}
        np.testing.assert_array_equal(query_seq.states, served[query.id])
        expected = np.vstack(
            [served[query.id], encoder.sep_vector[None, :]]
            + [served[h.case_id] for h in hits])
        np.testing.assert_array_equal(memory_seq.states, expected)

    def test_db_index_uses_stored_sentence_vectors(self, tmp_path):
        dim = 4
        vec = np.array([0.0, 1.0, 0.0, 0.0])
        records = [("c0#text", np.ones((2, dim)), vec)]
        path = tmp_path / "emb.bin"
        write_embedding_file(path, dim=dim, records=records)
        encoder = make_encoder(EncoderSpec(variant="file_backed", dim=dim,
                                           path=str(path)))
        db = build_case_database(
            [Case(id="c0", text="whatever", label="ad_hominem")], encoder)
        np.testing.assert_allclose(db.index[TEXT][0], vec, atol=1e-7)


class TestOptimizer:
    def test_sgd_step(self):
        config = _small_config(optimizer="sgd", learning_rate=0.5)
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([0.2, -0.4])}
        optimizer_step(params, grads, OptimizerState.for_params(params), config)
        np.testing.assert_allclose(params["w"], [0.9, 2.2])

    def test_adam_first_step_closed_form(self):
        config = _small_config(learning_rate=0.1)
        params = {"w": np.array([1.0, -3.0, 0.5])}
        grads = {"w": np.array([0.4, -0.02, 1e-12])}
        state = OptimizerState.for_params(params)
        optimizer_step(params, grads, state, config)
        g = grads["w"]
        expected = np.array([1.0, -3.0, 0.5]) - 0.1 * g / (np.abs(g) + config.eps)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-12)

    def test_adam_matches_reference_loop(self):
        config = _small_config(learning_rate=0.01)
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=4)}
        reference = params["w"].copy()
        state = OptimizerState.for_params(params)
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            optimizer_step(params, {"w": g.copy()}, state, config)
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** t)
            v_hat = v / (1 - config.beta2 ** t)
            reference -= config.learning_rate * m_hat / (np.sqrt(v_hat)
                                                         + config.eps)
            np.testing.assert_allclose(params["w"], reference, rtol=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        config = _small_config()
        params = {"w1": np.ones(2), "w2": np.ones(2)}
        grads = {"w1": np.ones(2), "w2": np.array([1.0, np.inf])}
        with pytest.raises(NumericsError, match="w2"):
            optimizer_step(params, grads, OptimizerState.for_params(params),
                           config)

    def test_step_counter(self):
        config = _small_config()
        params = {"a": np.ones(1), "b": np.ones(1)}
        state = OptimizerState.for_params(params)
        optimizer_step(params, {"a": np.ones(1), "b": np.ones(1)}, state, config)
        assert state.step == 1


class TestTrain:
    def test_input_validation(self):
        cases = make_toy_cases(per_class=2)
        db = _toy_db(cases)
        with pytest.raises(ConfigError, match="empty"):
            train(_small_config(), db, [])
        with pytest.raises(ConfigError, match="no label"):
            train(_small_config(), db,
                  cases + [Case(id="u", text="unlabeled words")])

    def test_epochs_zero_returns_init(self):
        cases = make_toy_cases(per_class=2)
        db = _toy_db(cases)
        config = _small_config(epochs=0)
        trained = train(config, db, cases)
        fresh = init_model(config, db_fingerprint=db.fingerprint())
        assert checkpoint_bytes(trained) == checkpoint_bytes(fresh)
        assert trained.history == []

    def test_learns_separable_toy_problem(self):
        cases = make_toy_cases(per_class=6)
        db = _toy_db(cases)
        config = _small_config(epochs=40, learning_rate=1e-2, batch_size=8)
        model = train(config, db, cases)
        assert len(model.history) == 40
        assert set(model.history[0]) == {"epoch", "loss", "accuracy"}
        assert model.history[-1]["loss"] < model.history[0]["loss"]
        assert model.history[-1]["accuracy"] == 1.0
        assert model.db_fingerprint == db.fingerprint()

    def test_two_runs_bit_identical(self):
        cases = make_toy_cases(per_class=3)
        db = _toy_db(cases)
        config = _small_config(epochs=3, batch_size=4)
        a = train(config, db, cases)
        b = train(config, db, cases)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_seed_changes_model(self):
        cases = make_toy_cases(per_class=3)
        db = _toy_db(cases)
        a = train(_small_config(epochs=2, seed=0), db, cases)
        b = train(_small_config(epochs=2, seed=1), db, cases)
        assert checkpoint_bytes(a) != checkpoint_bytes(b)

    def test_history_is_json_safe(self):
        import json

        cases = make_toy_cases(per_class=2)
        model = train(_small_config(epochs=1), _toy_db(cases), cases)
        json.dumps(model.history)


class TestFiniteDifferenceCheck:
    def test_checker_accepts_correct_gradient(self):
        x = np.array([0.7, -1.3, 2.1])

        def loss():
            return float((x ** 2).sum())

        err = max_relative_fd_error(loss, {"x": x}, {"x": 2 * x})
        assert err < 1e-8

    def test_checker_flags_wrong_gradient(self):
        x = np.array([0.7, -1.3, 2.1])

        def loss():
            return float((x ** 2).sum())

        err = max_relative_fd_error(loss, {"x": x}, {"x": 2 * x + 0.05})
        assert err > 1e-3

    @pytest.mark.parametrize("heads", [1, 2])
    def test_pipeline_gradients(self, heads):
        model, case, db = random_probe_setup(0, heads=heads)
        assert finite_difference_check(model, case, db) < 1e-4

    def test_bypass_gradients(self):
        model, case, db = random_probe_setup(1, attention_enabled=False)
        assert finite_difference_check(model, case, db) < 1e-4


class TestCheckpoint:
    def _model(self):
        cases = make_toy_cases(per_class=2)
        db = _toy_db(cases)
        return train(_small_config(epochs=1, k=2), db, cases)

    def test_round_trip(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.cbrm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert loaded.token_spec == model.token_spec
        assert loaded.history == model.history
        assert loaded.db_fingerprint == model.db_fingerprint
        tensors = {**model.adapter.tensors(), **model.classifier.tensors()}
        loaded_tensors = {**loaded.adapter.tensors(),
                          **loaded.classifier.tensors()}
        for name, tensor in tensors.items():
            np.testing.assert_array_equal(
                loaded_tensors[name], tensor.astype("<f4").astype(np.float64))

    def test_reserialization_is_identical(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.cbrm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert checkpoint_bytes(loaded) == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.cbrm"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        model = self._model()
        data = bytearray(checkpoint_bytes(model))
        data[4] = 9
        path = tmp_path / "model.cbrm"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        model = self._model()
        data = checkpoint_bytes(model)
        path = tmp_path / "model.cbrm"
        for cut in (3, 10, len(data) // 2, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(FormatError, match="truncated"):
                load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.cbrm"
        path.write_bytes(checkpoint_bytes(model) + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        model = self._model()
        data = checkpoint_bytes(model).replace(b"w_q", b"x_q", 1)
        path = tmp_path / "model.cbrm"
        path.write_bytes(data)
        with pytest.raises(FormatError, match="missing tensor"):
            load_checkpoint(path)
