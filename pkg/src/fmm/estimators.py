"""scikit-learn style wrappers over the numpy core.

Inputs are 2-D integer arrays of token ids: cls in column 0, then the
content tokens, then a suffix of padding. Every non-pad, non-cls position
is maskable.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from fmm.data import Dataset, evaluate_metric
from fmm.exceptions import ContractViolation
from fmm.importance import get_measure
from fmm.masf import dataset_pvalue, masf_fit, masf_pvalues
from fmm.model import ModelConfig
from fmm.training import Hyperparams, predict_dataset, train


def check_tokens(X, config):
    """Validate a token matrix against ``config`` and derive lengths/maskable."""
    raw = check_array(X, dtype=None, ensure_min_samples=1)
    if not np.issubdtype(raw.dtype, np.integer):
        if not np.issubdtype(raw.dtype, np.number) or np.any(raw != np.round(raw)):
            raise ContractViolation("token ids must be integers")
    X = raw.astype(np.int64)
    if X.shape[1] > config.max_seq_len:
        raise ContractViolation(f"sequences of width {X.shape[1]} exceed max_seq_len={config.max_seq_len}")
    if np.any((X < 0) | (X >= config.vocab_size)):
        raise ContractViolation("token id out of vocabulary range")
    if np.any(X[:, 0] != config.cls_token_id):
        raise ContractViolation("cls token must be at position 0")
    is_pad = X == config.pad_token_id
    lengths = X.shape[1] - is_pad.sum(axis=1)
    pos = np.arange(X.shape[1])[None, :]
    if np.any(is_pad != (pos >= lengths[:, None])):
        raise ContractViolation("padding must be a suffix")
    maskable = (pos < lengths[:, None]) & (X != config.cls_token_id)
    return X, lengths.astype(np.int64), maskable


def to_dataset(X, y, config, split="test"):
    X, lengths, maskable = check_tokens(X, config)
    y = np.zeros(len(X), dtype=np.int64) if y is None else np.asarray(y, dtype=np.int64)
    if y.shape != (len(X),):
        raise ContractViolation(f"y has shape {y.shape}, expected ({len(X)},)")
    if np.any((y < 0) | (y >= config.num_classes)):
        raise ContractViolation("label out of range")
    return Dataset(X, lengths, y, maskable, split, {"num_classes": config.num_classes})


class MaskedTransformerClassifier(ClassifierMixin, BaseEstimator):
    """Transformer encoder fine-tuned with a masking strategy.

    Labels must be integers in ``[0, num_classes)``. Without an explicit
    validation set, the last ``validation_fraction`` of the rows is held out
    for epoch selection.
    """

    def __init__(self, vocab_size=64, max_seq_len=16, num_layers=2, hidden_dim=32, num_heads=2,
                 num_classes=2, pad_token_id=0, cls_token_id=1, mask_token_id=2,
                 train_strategy="use_5050", val_strategy="use_both", learning_rate=3e-3,
                 batch_size=32, max_epochs=15, warmup_steps=50, validation_fraction=0.2,
                 metric="accuracy", random_state=0):
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.num_classes = num_classes
        self.pad_token_id = pad_token_id
        self.cls_token_id = cls_token_id
        self.mask_token_id = mask_token_id
        self.train_strategy = train_strategy
        self.val_strategy = val_strategy
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.warmup_steps = warmup_steps
        self.validation_fraction = validation_fraction
        self.metric = metric
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(
            vocab_size=self.vocab_size, max_seq_len=self.max_seq_len, num_layers=self.num_layers,
            hidden_dim=self.hidden_dim, num_heads=self.num_heads, num_classes=self.num_classes,
            pad_token_id=self.pad_token_id, cls_token_id=self.cls_token_id,
            mask_token_id=self.mask_token_id, seed=int(self.random_state),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._model_config()
        data = to_dataset(X, y, config, "train")
        if X_val is None:
            n_val = int(round(self.validation_fraction * len(data)))
            if not 0 < n_val < len(data):
                raise ContractViolation("validation_fraction leaves an empty train or validation split")
            val = data.subset(np.arange(len(data) - n_val, len(data)))
            data = data.subset(np.arange(len(data) - n_val))
        else:
            val = to_dataset(X_val, y_val, config, "validation")
        hp = Hyperparams(learning_rate=self.learning_rate, batch_size=self.batch_size,
                         max_epochs=self.max_epochs, warmup_steps=self.warmup_steps, metric=self.metric)
        report = train(config, (data, val), self.train_strategy, self.val_strategy, hp,
                       int(self.random_state))
        self.model_ = report.model
        self.train_report_ = report
        self.classes_ = np.arange(self.num_classes)
        self.n_features_in_ = data.tokens.shape[1]
        return self

    def _data(self, X):
        check_is_fitted(self, "model_")
        return to_dataset(X, None, self.model_.config)

    def predict_proba(self, X):
        d = self._data(X)
        return self.model_.predict_proba(d.tokens, d.lengths)

    def predict(self, X):
        d = self._data(X)
        return predict_dataset(self.model_, d)

    def score(self, X, y, sample_weight=None):
        return evaluate_metric(self.predict(X), np.asarray(y), self.metric, self.num_classes)


class MaSFDetector(BaseEstimator):
    """Per-observation in-distribution p-values from a fitted classifier.

    ``fit`` calibrates on in-distribution data, masked according to
    ``val_strategy`` (default: the strategy the classifier was tuned with).
    """

    def __init__(self, classifier, val_strategy=None, alpha=0.05, random_state=0):
        self.classifier = classifier
        self.val_strategy = val_strategy
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, y=None):
        check_is_fitted(self.classifier, "model_")
        model = self.classifier.model_
        data = to_dataset(X, y, model.config, "validation")
        self.calibration_ = masf_fit(model, data, np.random.default_rng(self.random_state),
                                     self.val_strategy)
        return self

    def score_samples(self, X):
        """p-values; small means out of distribution."""
        check_is_fitted(self, "calibration_")
        model = self.classifier.model_
        return masf_pvalues(self.calibration_, model, to_dataset(X, None, model.config))

    def dataset_pvalue(self, X):
        return float(dataset_pvalue(self.score_samples(X)))

    def predict(self, X):
        """+1 in distribution, -1 out of distribution, per observation."""
        return np.where(self.score_samples(X) < self.alpha, -1, 1)


class ImportanceExplainer(TransformerMixin, BaseEstimator):
    """Maps token matrices to per-token importance scores (NaN where not maskable)."""

    def __init__(self, classifier, measure="loo_abs", beam_width=10, random_state=0):
        self.classifier = classifier
        self.measure = measure
        self.beam_width = beam_width
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_is_fitted(self.classifier, "model_")
        self.measure_ = get_measure(self.measure, self.beam_width)
        return self

    def transform(self, X):
        check_is_fitted(self, "measure_")
        model = self.classifier.model_
        d = to_dataset(X, None, model.config)
        return self.measure_.scores(model, d.tokens, d.lengths, d.maskable,
                                    np.random.default_rng(self.random_state))
