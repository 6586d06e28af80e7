import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fmm.data import (
    Dataset,
    TaskConfig,
    class_majority,
    dumps_dataset,
    evaluate_metric,
    generate,
    loads_dataset,
)
from fmm.exceptions import ConfigurationError, ContractViolation


def _evidence_mask(ds, cfg):
    ev = np.zeros(cfg.vocab_size, dtype=bool)
    for c in range(cfg.num_classes):
        ev[list(cfg.evidence_ids(c))] = True
    return ev[ds.tokens]


class TestGenerator:
    def test_keyword_single_evidence_of_own_class(self):
        cfg = TaskConfig(n_train=500, n_val=10, n_test=10)
        tr, _, _ = generate(cfg)
        ev = _evidence_mask(tr, cfg)
        assert np.all(ev.sum(axis=1) == 1)
        own = np.array([tr.tokens[i][ev[i]][0] in cfg.evidence_ids(tr.labels[i]) for i in range(len(tr))])
        assert own.all()
        # once the evidence is masked no token distinguishes the classes
        masked = np.where(ev, cfg.mask_token_id, tr.tokens)
        assert not np.isin(masked, [e for c in range(2) for e in cfg.evidence_ids(c)]).any()

    def test_redundant_copies(self):
        cfg = TaskConfig(kind="redundant", redundancy=3, n_train=500, n_val=10, n_test=10)
        tr, _, _ = generate(cfg)
        ev = _evidence_mask(tr, cfg)
        assert np.all(ev.sum(axis=1) == 3)
        for i in range(50):
            assert len(set(tr.tokens[i][ev[i]])) == 1

    def test_layout(self):
        cfg = TaskConfig(n_train=300, n_val=10, n_test=10)
        tr, _, _ = generate(cfg)
        assert np.all(tr.tokens[:, 0] == cfg.cls_token_id)
        assert np.all((tr.lengths >= cfg.min_len) & (tr.lengths <= cfg.max_len))
        pos = np.arange(tr.tokens.shape[1])[None, :]
        assert np.all((tr.tokens == cfg.pad_token_id) == (pos >= tr.lengths[:, None]))
        assert np.all(tr.maskable == ((pos >= 1) & (pos < tr.lengths[:, None])))
        assert not np.any(tr.tokens == cfg.mask_token_id)

    def test_label_length_independent(self):
        tr, _, _ = generate(TaskConfig(n_train=10_000, n_val=10, n_test=10, seed=5))
        rho = stats.pointbiserialr(tr.labels, tr.lengths).statistic
        assert abs(rho) < 0.05

    def test_priors(self):
        tr, _, _ = generate(TaskConfig(n_train=10_000, n_val=10, n_test=10))
        assert abs(tr.labels.mean() - 0.4) < 0.02

    def test_deterministic_and_split_independent(self):
        a = generate(TaskConfig(n_train=50, n_val=20, n_test=20, seed=9))
        b = generate(TaskConfig(n_train=70, n_val=20, n_test=20, seed=9))
        for f in ("tokens", "lengths", "labels"):
            np.testing.assert_array_equal(getattr(a[2], f), getattr(b[2], f))
        assert not np.array_equal(a[0].tokens[:20], a[1].tokens)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TaskConfig(priors=(0.5, 0.6))
        with pytest.raises(ConfigurationError):
            TaskConfig(kind="keyword", redundancy=2)
        with pytest.raises(ConfigurationError):
            TaskConfig(vocab_size=7)
        with pytest.raises(ConfigurationError):
            TaskConfig(kind="nope")


class TestMetrics:
    def test_trivial(self):
        y = np.array([0, 1, 1, 0])
        assert evaluate_metric(y, y) == 1.0
        assert evaluate_metric(y, y, "macro_f1") == 1.0
        assert evaluate_metric(1 - y, y) == 0.0

    def test_class_majority(self):
        y = np.array([0] * 5 + [1] * 5)
        ds = Dataset(np.ones((10, 2), dtype=int), np.full(10, 2), y, np.ones((10, 2), bool))
        assert class_majority(ds) == 0.5
        y = np.array([0] * 7 + [1] * 3)
        ds = Dataset(np.ones((10, 2), dtype=int), np.full(10, 2), y, np.ones((10, 2), bool))
        assert class_majority(ds) == pytest.approx(0.7)
        # constant predictor: F1 of the majority class is 2*7/(2*7+3), the other is 0
        assert class_majority(ds, "macro_f1") == pytest.approx((14 / 17) / 2, abs=1e-12)

    def test_three_class_macro_f1(self):
        # confusion rows=true, cols=pred: [[2,1,0],[0,1,1],[1,0,2]]
        labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
        preds = np.array([0, 0, 1, 1, 2, 0, 2, 2])
        f1 = [2 * 2 / (4 + 1 + 1), 2 * 1 / (2 + 1 + 1), 2 * 2 / (4 + 1 + 1)]
        assert evaluate_metric(preds, labels, "macro_f1", 3) == pytest.approx(np.mean(f1), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ContractViolation):
            evaluate_metric([0, 1], [0])
        with pytest.raises(ContractViolation):
            evaluate_metric([], [])
        with pytest.raises(ConfigurationError):
            evaluate_metric([0], [0], "auc")

    @given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.data())
    def test_macro_f1_matches_sklearn(self, labels, data):
        from sklearn.metrics import f1_score

        preds = data.draw(st.lists(st.integers(0, 2), min_size=len(labels), max_size=len(labels)))
        ours = evaluate_metric(preds, labels, "macro_f1", 3)
        ref = f1_score(labels, preds, average="macro", labels=[0, 1, 2], zero_division=0)
        assert ours == pytest.approx(ref, abs=1e-12)


class TestSerialization:
    def test_round_trip(self):
        _, _, te = generate(TaskConfig(kind="redundant", redundancy=2, n_train=5, n_val=5, n_test=40))
        text = dumps_dataset(te)
        back = loads_dataset(text)
        for f in ("tokens", "lengths", "labels", "maskable"):
            np.testing.assert_array_equal(getattr(back, f), getattr(te, f))
        assert back.split == "test" and back.task == te.task
        assert dumps_dataset(back) == text

    def test_header_is_versioned(self):
        import json

        _, _, te = generate(TaskConfig(n_train=5, n_val=5, n_test=5))
        header = json.loads(dumps_dataset(te).splitlines()[0])
        assert header["version"] == 1
        bad = dumps_dataset(te).replace('"version": 1', '"version": 2')
        with pytest.raises(ConfigurationError):
            loads_dataset(bad)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 16))
    def test_round_trip_property(self, seed, max_len):
        cfg = TaskConfig(seed=seed, min_len=2, max_len=max_len, n_train=3, n_val=3, n_test=7)
        te = generate(cfg)[2]
        assert dumps_dataset(loads_dataset(dumps_dataset(te))) == dumps_dataset(te)
