import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fmm.data import TaskConfig, class_majority, generate
from fmm.exceptions import ConfigurationError, ContractViolation, TrainingError
from fmm.model import ModelConfig
from fmm.training import (
    Hyperparams,
    build_validation,
    evaluate,
    mask_minibatch,
    mask_rows,
    masked_count,
    score_dataset,
    select_epoch,
    train,
    uniform_mask,
)

MASK = 2


@pytest.fixture(scope="module")
def batch():
    return generate(TaskConfig(n_train=64, n_val=5, n_test=5, seed=11))[0]


def test_masked_count_rounds_half_up():
    np.testing.assert_array_equal(masked_count([0.0, 0.25, 0.5, 1.0], [10, 10, 5, 7]), [0, 3, 3, 7])


@given(st.integers(0, 2**32 - 1), st.integers(1, 15))
def test_mask_rows_exact_counts(seed, T):
    r = np.random.default_rng(seed)
    n = 6
    maskable = r.random((n, T)) < 0.7
    counts = r.integers(0, maskable.sum(axis=1) + 1)
    tokens = np.full((n, T), 9)
    out = mask_rows(tokens, maskable, counts, r, MASK)
    hit = out == MASK
    np.testing.assert_array_equal(hit.sum(axis=1), counts)
    assert not np.any(hit & ~maskable)


class TestStrategies:
    def test_no_masking_identity(self, batch, rng):
        assert mask_minibatch(batch, "no_masking", rng, MASK) is batch
        assert build_validation(batch, "no_masking", rng, MASK) is batch

    def test_masking_forced_ratio_one(self, batch, rng):
        out = mask_minibatch(batch, "masking", rng, MASK, ratios=np.ones(len(batch)))
        assert np.all((out.tokens == MASK) == batch.maskable)

    def test_5050_first_half_untouched(self, batch, rng):
        out = mask_minibatch(batch, "use_5050", rng, MASK, ratios=np.ones(len(batch)))
        half = (len(batch) + 1) // 2
        np.testing.assert_array_equal(out.tokens[:half], batch.tokens[:half])
        assert np.all((out.tokens[half:] == MASK) == batch.maskable[half:])

    def test_ratio_distribution_uniform(self, rng):
        n, T = 10_000, 401
        maskable = np.zeros((n, T), bool)
        maskable[:, 1:] = True
        out, ratios = uniform_mask(np.full((n, T), 9), maskable, rng, MASK)
        realized = (out == MASK).sum(axis=1) / 400
        assert stats.kstest(ratios, "uniform").statistic < 0.02
        assert stats.kstest(realized, "uniform").statistic < 0.02

    def test_masking_touches_most_rows(self, rng):
        ds = generate(TaskConfig(min_len=9, n_train=2000, n_val=5, n_test=5))[0]
        out = mask_minibatch(ds, "masking", rng, MASK)
        assert np.mean((out.tokens == MASK).any(axis=1)) > 0.9

    def test_use_both(self, batch, rng):
        out = build_validation(batch, "use_both", rng, MASK)
        assert len(out) == 2 * len(batch)
        np.testing.assert_array_equal(out.tokens[: len(batch)], batch.tokens)
        np.testing.assert_array_equal(out.labels[len(batch):], batch.labels)

    def test_unknown_strategy(self, batch, rng):
        with pytest.raises(ValueError):
            mask_minibatch(batch, "half", rng, MASK)


def test_select_epoch_ties_to_earliest():
    assert select_epoch([0.5, 0.9, 0.9, 0.1]) == 1
    assert select_epoch([0.7]) == 0


class TestTrain:
    def test_tiny_run_is_deterministic(self):
        tr, va, _ = generate(TaskConfig(n_train=96, n_val=32, n_test=5))
        cfg = ModelConfig(num_layers=1, hidden_dim=8)
        hp = Hyperparams(max_epochs=2)
        a = train(cfg, (tr, va), "use_5050", "use_both", hp, seed=3)
        b = train(cfg, (tr, va), "use_5050", "use_both", hp, seed=3)
        assert a.val_metrics == b.val_metrics
        assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)
        assert a.model.metadata["val_strategy"] == "use_both"
        assert a.selected_epoch == select_epoch(a.val_metrics)
        assert len(a.val_metrics) == 2

    def test_divergence_reported(self):
        tr, va, _ = generate(TaskConfig(n_train=64, n_val=16, n_test=5))
        with pytest.raises(TrainingError) as exc, np.errstate(all="ignore"):
            train(ModelConfig(num_layers=1, hidden_dim=8), (tr, va), hyperparams=Hyperparams(learning_rate=1e200, warmup_steps=0))
        assert exc.value.epoch == 0

    def test_bad_hyperparams(self):
        tr, va, _ = generate(TaskConfig(n_train=8, n_val=8, n_test=5))
        with pytest.raises(ConfigurationError):
            train(ModelConfig(), (tr, va), hyperparams=Hyperparams(batch_size=0))

    def test_trained_model(self, trained, keyword_splits):
        _, _, te = keyword_splits
        assert evaluate(trained, te, 0.0, np.random.default_rng(0)) == score_dataset(trained, te)
        assert score_dataset(trained, te) >= 0.95
        assert evaluate(trained, te, 1.0, np.random.default_rng(0)) >= class_majority(te) - 0.05
        with pytest.raises(ContractViolation):
            evaluate(trained, te, 1.5, np.random.default_rng(0))
