import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmm.exceptions import ConfigurationError, ContractViolation, NumericError
from fmm.model import (
    ModelConfig,
    Observation,
    TransformerModel,
    apply_mask,
    forward,
    input_gradient,
    predict,
)

from conftest import random_batch


def obs(tokens, label=0):
    return Observation.from_tokens(tokens, label)


class TestForward:
    def test_probabilities_sum_to_one(self, small_model, rng):
        for _ in range(5):
            tokens, lengths, _ = random_batch(small_model.config, rng, n=1)
            probs, trace = forward(small_model, obs(tokens[0][: lengths[0]]))
            assert trace is None
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_zero_head_gives_uniform(self, small_config, rng):
        cfg = ModelConfig(**{**small_config.to_dict(), "num_classes": 3})
        m = TransformerModel.initialize(cfg, rng)
        m.params["head.w"][:] = 0
        m.params["head.b"][:] = 0
        probs, _ = m.forward(obs([1, 5, 6, 7]))
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)

    def test_repeatable(self, small_model):
        o = obs([1, 4, 9, 3, 3])
        a, ta = small_model.forward(o, capture_trace=True)
        b, tb = small_model.forward(o, capture_trace=True)
        assert a.tobytes() == b.tobytes()
        assert ta.activations.tobytes() == tb.activations.tobytes()

    def test_trace_shape(self, small_model):
        _, trace = small_model.forward(obs([1, 4, 9, 3]), capture_trace=True)
        cfg = small_model.config
        assert trace.activations.shape == (cfg.num_layers, 4, cfg.hidden_dim)
        assert trace.valid_len == 4

    def test_padding_invariance(self, small_model, rng):
        cfg = small_model.config
        tokens, lengths, _ = random_batch(cfg, rng, n=6, min_len=3)
        a = small_model.logits(tokens, lengths)
        junk = tokens.copy()
        pad = np.arange(cfg.max_seq_len)[None, :] >= lengths[:, None]
        # keys beyond the length are hidden, so their content is irrelevant
        junk[pad] = 7
        np.testing.assert_allclose(small_model.logits(junk, lengths), a, atol=1e-12)
        short = [small_model.logits(tokens[i : i + 1, : lengths[i]], lengths[i : i + 1]) for i in range(6)]
        np.testing.assert_allclose(np.concatenate(short), a, atol=1e-12)

    def test_cls_fast_path_matches_full_pass(self, small_model, rng):
        tokens, lengths, _ = random_batch(small_model.config, rng, n=8)
        full, _, _ = small_model.run(tokens, lengths)
        np.testing.assert_allclose(small_model.logits(tokens, lengths), full, atol=1e-13)

    def test_non_finite_reports_layer(self, small_model):
        m = small_model.copy()
        m.params["l0.mlp.w1"][:] = np.inf
        with pytest.raises(NumericError) as exc, np.errstate(all="ignore"):
            m.forward(obs([1, 4, 5]))
        assert exc.value.layer is not None

    def test_input_validation(self, small_model):
        with pytest.raises(ConfigurationError):
            small_model.forward(obs([1] + [4] * 20))
        with pytest.raises(ContractViolation):
            small_model.forward(Observation((4, 1, 5), 0, (0, 2), 3))
        with pytest.raises(ContractViolation):
            small_model.forward(obs([1, 99, 4]))


class TestPredict:
    def test_argmax_and_tie(self, small_model):
        m = small_model.copy()
        m.params["head.w"][:] = 0
        m.params["head.b"][:] = [0.0, 1.0]
        assert predict(m, obs([1, 4])) == 1
        m.params["head.b"][:] = 0.0
        assert predict(m, obs([1, 4])) == 0

    def test_consistent_with_forward(self, small_model, rng):
        tokens, lengths, _ = random_batch(small_model.config, rng, n=1000)
        batch = small_model.predict(tokens, lengths)
        for i in range(0, 1000, 50):
            probs, _ = small_model.forward(obs(tokens[i, : lengths[i]]))
            assert batch[i] == int(np.argmax(probs))


class TestMask:
    def test_identity_and_full(self):
        o = obs([1, 4, 5, 6])
        assert apply_mask(o, [], 2) == o
        assert apply_mask(o, o.maskable, 2).tokens == (1, 2, 2, 2)

    def test_non_maskable_rejected(self):
        with pytest.raises(ContractViolation):
            apply_mask(obs([1, 4, 5]), [0], 2)

    @given(st.lists(st.integers(3, 19), min_size=1, max_size=7), st.data())
    def test_composition(self, body, data):
        o = obs([1] + body)
        a = data.draw(st.sets(st.sampled_from(o.maskable)))
        b = data.draw(st.sets(st.sampled_from(o.maskable)))
        assert apply_mask(apply_mask(o, a, 2), b, 2) == apply_mask(o, a | b, 2)


def _fd_check(model, tokens, lengths, targets, rng, n_coords=3, h=1e-4):
    """Central differences on the token-vector input, relative error per coordinate."""
    E = model.token_embedding
    tv = E[tokens].copy()
    _, d_h = model.embedding_gradient(tokens, lengths, targets, tv)
    errs = []
    for _ in range(n_coords):
        t = int(rng.integers(0, lengths[0]))
        k = int(rng.integers(0, tv.shape[-1]))
        up, dn = tv.copy(), tv.copy()
        up[0, t, k] += h
        dn[0, t, k] -= h
        fu = model.logits(tokens, lengths, up)[0, targets[0]]
        fd = model.logits(tokens, lengths, dn)[0, targets[0]]
        num = (fu - fd) / (2 * h)
        errs.append(abs(num - d_h[0, t, k]) / max(abs(num), abs(d_h[0, t, k]), 1e-6))
    return max(errs)


class TestGradient:
    def test_embedding_gradient_fd(self, small_config, rng):
        for draw in range(5):
            m = TransformerModel.initialize(small_config, np.random.default_rng(draw))
            tokens, lengths, _ = random_batch(small_config, rng, n=1)
            assert _fd_check(m, tokens, lengths, np.array([draw % 2]), rng) < 1e-4

    def test_parameter_gradient_fd(self, small_model, rng):
        tokens, lengths, _ = random_batch(small_model.config, rng, n=3)
        labels = np.array([0, 1, 1])
        _, grads = small_model.loss_and_grads(tokens, lengths, labels)
        for name in ("l0.attn.wq", "l1.mlp.w2", "l0.ln2.g", "head.w", "pos_emb", "tok_emb"):
            p = small_model.params[name]
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            if name == "tok_emb":
                idx = (int(tokens[0, 1]),) + idx[1:]
            m = small_model.copy()
            m.params[name][idx] += 1e-5
            lu, _ = m.loss_and_grads(tokens, lengths, labels)
            m.params[name][idx] -= 2e-5
            ld, _ = m.loss_and_grads(tokens, lengths, labels)
            num = (lu - ld) / 2e-5
            assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), 1e-6) + 1e-9, name

    def test_position_ignored_by_logit_has_zero_gradient(self, small_model):
        # padding positions never reach the cls logit
        tokens = np.array([[1, 4, 5, 0, 0]])
        _, d_h = small_model.embedding_gradient(tokens, np.array([3]), [0])
        np.testing.assert_array_equal(d_h[0, 3:], 0.0)

    def test_bundle_shapes(self, small_model):
        b = input_gradient(small_model, obs([1, 4, 5]), 1)
        cfg = small_model.config
        assert b.d_f_d_h.shape == (3, cfg.hidden_dim)
        assert b.d_f_d_x.shape == (3, cfg.vocab_size)
        np.testing.assert_allclose(b.d_f_d_x, b.d_f_d_h @ small_model.token_embedding.T)
        with pytest.raises(ContractViolation):
            input_gradient(small_model, obs([1, 4]), 5)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(hidden_dim=10, num_heads=3)
        with pytest.raises(ConfigurationError):
            ModelConfig(num_layers=0)

    def test_round_trip(self, small_config):
        assert ModelConfig.from_dict(small_config.to_dict()) == small_config

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_initialize_deterministic(self, seed):
        a = TransformerModel.initialize(ModelConfig(), np.random.default_rng(seed))
        b = TransformerModel.initialize(ModelConfig(), np.random.default_rng(seed))
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
