import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from helpers import block_rel_err, numeric_sentence_gradient
from mrnn.corpus import build_vocabulary
from mrnn.model import (ModelConfig, ModelParams, backward_sentence,
                        forward_sentence, forward_step, load_checkpoint,
                        nearest_words, save_checkpoint,
                        sentence_inputs_targets)
from mrnn.numerics import Rng


def tiny_config(variant="mrnn"):
    return ModelConfig(vocab_size=11, d_i=3, variant=variant,
                       d_e1=4, d_e2=4, d_r=6, d_m=8)


def tiny_params(seed=0, variant="mrnn"):
    return ModelParams.initialize(tiny_config(variant), Rng(seed))


FEAT = Rng(123).uniform(-1, 1, 3)


class TestConfig:
    def test_bad_variant(self):
        with pytest.raises(ValueError, match="variant"):
            ModelConfig(vocab_size=5, d_i=2, variant="lstm")

    def test_nonpositive_dim(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=5, d_i=2, d_r=0)

    def test_baseline_ignores_multimodal_dims(self):
        ModelConfig(vocab_size=5, d_i=0, variant="baseline", d_m=0)

    def test_shape_congruence_params_vs_gradients(self):
        params = tiny_params()
        grads = params.zeros_like()
        for name in params.names():
            assert grads[name].shape == params[name].shape


class TestForward:
    def test_zero_params_uniform_distribution(self):
        for variant in ("mrnn", "baseline"):
            params = ModelParams.zeros(tiny_config(variant))
            trace = forward_sentence(params, [3, 4, 5], FEAT)
            for step in trace.steps:
                assert_allclose(step.y, np.full(11, 1 / 11), atol=1e-15)

    def test_zero_recurrent_state_kills_recurrent_term(self):
        params_a = tiny_params(seed=1)
        params_b = params_a.copy()
        params_b.arrays["U_r"] = Rng(99).uniform(-1, 1, 36).reshape(6, 6)
        r0 = np.zeros(6)
        ya, ra, _ = forward_step(params_a, 4, r0, FEAT)
        yb, rb, _ = forward_step(params_b, 4, r0, FEAT)
        assert_array_equal(ra, rb)
        assert_array_equal(ya, yb)

    def test_embedding_lookup_equals_onehot_matvec(self):
        params = tiny_params()
        k = 7
        onehot = np.zeros(11)
        onehot[k] = 1.0
        assert_array_equal(params["E1"][k], params["E1"].T @ onehot)

    def test_empty_sentence_single_step(self):
        trace = forward_sentence(tiny_params(), [], FEAT)
        assert len(trace) == 1
        inputs, targets = sentence_inputs_targets([])
        assert inputs == [0] and targets == [1]

    def test_trace_probabilities_normalized(self):
        trace = forward_sentence(tiny_params(seed=2), [1, 9, 2, 4], FEAT)
        assert len(trace) == 5
        for step in trace.steps:
            assert abs(step.y.sum() - 1.0) < 1e-6

    def test_deterministic(self):
        a = forward_sentence(tiny_params(seed=3), [5, 6], FEAT)
        b = forward_sentence(tiny_params(seed=3), [5, 6], FEAT)
        for sa, sb in zip(a.steps, b.steps):
            assert_array_equal(sa.y, sb.y)

    def test_word_index_out_of_range(self):
        with pytest.raises(IndexError):
            forward_step(tiny_params(), 11, np.zeros(6), FEAT)

    def test_feature_dim_mismatch(self):
        with pytest.raises(ValueError, match="feature"):
            forward_step(tiny_params(), 1, np.zeros(6), np.zeros(5))

    def test_zero_image_projection_makes_output_image_free(self):
        params = tiny_params(seed=4)
        params.arrays["V_I"][:] = 0.0
        feat_b = Rng(55).uniform(-2, 2, 3)
        ya = forward_sentence(params, [2, 3], FEAT)
        yb = forward_sentence(params, [2, 3], feat_b)
        for sa, sb in zip(ya.steps, yb.steps):
            assert_array_equal(sa.y, sb.y)

    def test_baseline_never_sees_the_image(self):
        params = tiny_params(variant="baseline")
        ya = forward_sentence(params, [2, 3], None)
        yb = forward_sentence(params, [2, 3], FEAT)
        for sa, sb in zip(ya.steps, yb.steps):
            assert_array_equal(sa.y, sb.y)


class TestBackward:
    def test_zero_params_loss_is_uniform(self):
        tokens = [3, 4, 5, 6]
        for variant in ("mrnn", "baseline"):
            params = ModelParams.zeros(tiny_config(variant))
            trace = forward_sentence(params, tokens, FEAT)
            _, targets = sentence_inputs_targets(tokens)
            _, loss = backward_sentence(params, trace, targets, FEAT)
            assert loss == pytest.approx((len(tokens) + 1) * np.log(11), abs=1e-9)

    def test_length_mismatch(self):
        params = tiny_params()
        trace = forward_sentence(params, [1, 2], FEAT)
        with pytest.raises(ValueError, match="targets"):
            backward_sentence(params, trace, [1, 2], FEAT)

    @pytest.mark.parametrize("variant", ["mrnn", "baseline"])
    def test_matches_finite_differences(self, variant):
        params = tiny_params(seed=6, variant=variant)
        feat = None if variant == "baseline" else FEAT
        tokens = [2, 7, 4, 9, 1]
        trace = forward_sentence(params, tokens, feat)
        _, targets = sentence_inputs_targets(tokens)
        analytic, _ = backward_sentence(params, trace, targets, feat)
        numeric = numeric_sentence_gradient(params, tokens, feat)
        for name in params.names():
            assert block_rel_err(analytic[name], numeric[name]) < 1e-6, name

    def test_gradient_additivity(self):
        # two backward passes on the same sentence sum to twice one pass
        params = tiny_params(seed=7)
        tokens = [1, 2, 3]
        trace = forward_sentence(params, tokens, FEAT)
        _, targets = sentence_inputs_targets(tokens)
        once, loss1 = backward_sentence(params, trace, targets, FEAT)
        total = params.zeros_like()
        total.add_scaled(once, 1.0)
        again, loss2 = backward_sentence(params, trace, targets, FEAT)
        total.add_scaled(again, 1.0)
        assert loss1 == loss2
        for name in params.names():
            assert_allclose(total[name], 2.0 * once[name], rtol=0, atol=1e-15)

    def test_gradients_finite(self):
        params = tiny_params(seed=8)
        trace = forward_sentence(params, [1, 5, 9], FEAT)
        grads, _ = backward_sentence(params, trace, [5, 9, 1, 1], FEAT)
        for name in params.names():
            assert np.all(np.isfinite(grads[name]))


class TestNearestWords:
    def make(self):
        vocab = build_vocabulary(["sand waves shore", "summit ridge pines"])
        cfg = ModelConfig(vocab_size=vocab.size, d_i=2, d_e1=4, d_e2=4, d_r=4, d_m=4)
        return vocab, ModelParams.initialize(cfg, Rng(10))

    def test_k_zero(self):
        vocab, params = self.make()
        assert nearest_words(params, vocab, "sand", 0) == []

    def test_duplicate_row_ranks_first(self):
        vocab, params = self.make()
        i, j = vocab.token_to_index["sand"], vocab.token_to_index["ridge"]
        params.arrays["E1"][j] = params.arrays["E1"][i]
        assert nearest_words(params, vocab, "sand", 1) == ["ridge"]

    def test_unknown_token(self):
        vocab, params = self.make()
        with pytest.raises(KeyError):
            nearest_words(params, vocab, "zebra", 3)

    def test_baseline_has_no_embeddings(self):
        vocab, _ = self.make()
        params = ModelParams.initialize(
            ModelConfig(vocab_size=vocab.size, d_i=2, variant="baseline", d_r=4), Rng(0))
        with pytest.raises(ValueError, match="embedding"):
            nearest_words(params, vocab, "sand", 1)

    def test_excludes_query_and_breaks_ties_by_index(self):
        vocab, params = self.make()
        params.arrays["E1"][:] = 0.0  # all rows identical: order = vocab index
        out = nearest_words(params, vocab, "sand", 3)
        query = vocab.token_to_index["sand"]
        expected = [vocab.index_to_token[i] for i in range(3 + 1) if i != query][:3]
        assert out == expected

    def test_trained_embeddings_cluster_by_topic(self):
        # statistical oracle: after training on the synthetic corpus, nouns of
        # the same topic sit closer in embedding space than nouns of other
        # topics, on average (fixed seed; the margin is comfortable)
        from mrnn.corpus import SynthSpec, _topic_bank, generate_synthetic_corpus
        from mrnn.training import TrainConfig, train

        spec = SynthSpec(n_topics=3, captions_per_image=4, noise_dim=2,
                         train_frac=1.0, val_frac=0.0)
        split, store, vocab = generate_synthetic_corpus(Rng(33), 40, spec)
        config = TrainConfig(
            model=ModelConfig(vocab_size=vocab.size, d_i=store.feature_dim,
                              d_e1=24, d_e2=24, d_r=32, d_m=32),
            learning_rate=0.3, lambda_reg=0.0, batch_size=16, epochs=80, seed=2)
        params, _ = train(config, split, store)

        noun_banks = [[w for w in _topic_bank(k)[1] if w in vocab] for k in range(3)]
        same, cross = [], []
        for k, nouns in enumerate(noun_banks):
            others = [w for j in range(3) if j != k for w in noun_banks[j]]
            for w in nouns:
                ranked = nearest_words(params, vocab, w, vocab.size - 1)
                pos = {tok: i for i, tok in enumerate(ranked)}
                same += [pos[t] for t in nouns if t != w]
                cross += [pos[t] for t in others]
        assert np.mean(same) < np.mean(cross)


class TestCheckpoint:
    def test_round_trip_params_equal(self, tmp_path):
        params = tiny_params(seed=11)
        save_checkpoint(params, tmp_path / "m.mrnm")
        loaded = load_checkpoint(tmp_path / "m.mrnm")
        assert loaded.config == params.config
        for name in params.names():
            assert_array_equal(loaded[name], params[name])

    def test_save_load_save_bit_identical(self, tmp_path):
        params = tiny_params(seed=12, variant="baseline")
        save_checkpoint(params, tmp_path / "a.mrnm")
        save_checkpoint(load_checkpoint(tmp_path / "a.mrnm"), tmp_path / "b.mrnm")
        assert (tmp_path / "a.mrnm").read_bytes() == (tmp_path / "b.mrnm").read_bytes()

    def test_float32_mode_preserved(self, tmp_path):
        params = ModelParams.initialize(tiny_config(), Rng(1), dtype=np.float32)
        save_checkpoint(params, tmp_path / "m.mrnm")
        loaded = load_checkpoint(tmp_path / "m.mrnm")
        assert loaded.dtype == np.float32
        for name in params.names():
            assert_array_equal(loaded[name], params[name])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.mrnm").write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x.mrnm")

    def test_truncated(self, tmp_path):
        params = tiny_params()
        save_checkpoint(params, tmp_path / "m.mrnm")
        blob = (tmp_path / "m.mrnm").read_bytes()
        (tmp_path / "cut.mrnm").write_bytes(blob[:-100])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "cut.mrnm")
