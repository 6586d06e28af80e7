"""Masked fine-tuning: mini-batch masking strategies, epoch selection and evaluation."""

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from fmm.data import Dataset, evaluate_metric
from fmm.exceptions import ConfigurationError, ContractViolation, NumericError, TrainingError
from fmm.model import ModelConfig, TransformerModel

log = logging.getLogger(__name__)


class TrainStrategy(str, enum.Enum):
    NO_MASKING = "no_masking"
    MASKING = "masking"
    USE_5050 = "use_5050"


class ValStrategy(str, enum.Enum):
    NO_MASKING = "no_masking"
    MASKING = "masking"
    USE_BOTH = "use_both"


def masked_count(ratio, n_maskable):
    """``round(ratio * n)`` with halves rounded up."""
    return np.floor(np.asarray(ratio) * np.asarray(n_maskable) + 0.5).astype(np.int64)


def mask_rows(tokens, maskable, counts, rng, mask_token_id, exclude=None):
    """Mask ``counts[i]`` uniformly chosen maskable positions in each row.

    ``exclude`` marks positions that are never chosen (already masked).
    Returns a new token array.
    """
    tokens = np.array(tokens, copy=True)
    eligible = maskable if exclude is None else maskable & ~exclude
    keys = rng.random(tokens.shape)
    keys = np.where(eligible, keys, np.inf)
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    chosen = (ranks < np.asarray(counts)[:, None]) & eligible
    tokens[chosen] = mask_token_id
    return tokens


def uniform_mask(tokens, maskable, rng, mask_token_id, ratios=None):
    """Mask each row at its own ratio ``u ~ Uniform[0, 1]`` (or the given ratios)."""
    n = tokens.shape[0]
    if ratios is None:
        ratios = rng.random(n)
    counts = masked_count(ratios, maskable.sum(axis=1))
    return mask_rows(tokens, maskable, counts, rng, mask_token_id), ratios


def mask_minibatch(batch, strategy, rng, mask_token_id, ratios=None):
    """Apply a training strategy to one (already shuffled) mini-batch.

    Under ``USE_5050`` the first ``ceil(n/2)`` rows stay untouched and the rest
    are masked; the split is deterministic, not a per-row coin flip.
    """
    strategy = TrainStrategy(strategy)
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    if strategy is TrainStrategy.NO_MASKING:
        return batch
    if strategy is TrainStrategy.MASKING:
        tokens, _ = uniform_mask(batch.tokens, batch.maskable, rng, mask_token_id, ratios)
        return batch.replace_tokens(tokens)
    keep = (len(batch) + 1) // 2
    tokens = batch.tokens.copy()
    if ratios is not None:
        ratios = np.asarray(ratios)[keep:]
    tokens[keep:], _ = uniform_mask(
        batch.tokens[keep:], batch.maskable[keep:], rng, mask_token_id, ratios
    )
    return batch.replace_tokens(tokens)


def build_validation(val_dataset, strategy, rng, mask_token_id):
    strategy = ValStrategy(strategy)
    if len(val_dataset) == 0:
        raise ContractViolation("empty validation dataset")
    if strategy is ValStrategy.NO_MASKING:
        return val_dataset
    tokens, _ = uniform_mask(val_dataset.tokens, val_dataset.maskable, rng, mask_token_id)
    masked = val_dataset.replace_tokens(tokens)
    if strategy is ValStrategy.MASKING:
        return masked
    return Dataset.concatenate([val_dataset, masked])


@dataclass
class Hyperparams:
    """Optimizer and loop settings.

    The default optimizer is Adam with ``beta1 = 0`` (no momentum), i.e.
    bias-corrected RMSProp.
    """

    learning_rate: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 15
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 50
    metric: str = "accuracy"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    def __init__(self, params, hp):
        self.hp = hp
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        hp = self.hp
        self.t += 1
        lr = hp.learning_rate
        if hp.warmup_steps:
            lr *= min(1.0, self.t / hp.warmup_steps)
        c1 = 1.0 - hp.beta1**self.t
        c2 = 1.0 - hp.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= hp.beta1
            m += (1.0 - hp.beta1) * g
            v *= hp.beta2
            v += (1.0 - hp.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)


@dataclass
class TrainReport:
    val_metrics: list
    train_losses: list
    selected_epoch: int
    model: TransformerModel = field(repr=False)
    seed: int = 0
    train_strategy: str = TrainStrategy.USE_5050.value
    val_strategy: str = ValStrategy.USE_BOTH.value

    def to_dict(self):
        return {
            "seed": self.seed,
            "train_strategy": self.train_strategy,
            "val_strategy": self.val_strategy,
            "selected_epoch": self.selected_epoch,
            "val_metrics": [float(v) for v in self.val_metrics],
            "train_losses": [float(v) for v in self.train_losses],
        }


def select_epoch(val_metrics):
    """Index of the best validation metric; ties go to the earliest epoch."""
    return int(np.argmax(np.asarray(val_metrics)))


def predict_dataset(model, dataset, batch_size=512):
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.predict(dataset.tokens[sl], dataset.lengths[sl]))
    return np.concatenate(out)


def score_dataset(model, dataset, metric="accuracy"):
    preds = predict_dataset(model, dataset)
    return evaluate_metric(preds, dataset.labels, metric, dataset.num_classes)


def train(model_config, datasets, train_strategy="use_5050", val_strategy="use_both",
          hyperparams=None, seed=0):
    """Fine-tune a freshly initialized model and return the best-epoch checkpoint.

    ``datasets`` is ``(train, validation)``. Every epoch is run; the returned
    model is the snapshot from the epoch with the highest validation metric.
    """
    hp = hyperparams or Hyperparams()
    train_set, val_set = datasets[0], datasets[1]
    train_strategy = TrainStrategy(train_strategy)
    val_strategy = ValStrategy(val_strategy)
    if len(train_set) == 0:
        raise ConfigurationError("empty training set")
    if hp.batch_size < 1 or hp.max_epochs < 1:
        raise ConfigurationError("batch_size and max_epochs must be >= 1")

    s_init, s_train, s_val = np.random.SeedSequence(seed).spawn(3)
    cfg = ModelConfig(**{**model_config.to_dict(), "seed": seed})
    model = TransformerModel.initialize(cfg, np.random.default_rng(s_init))
    rng = np.random.default_rng(s_train)
    val_built = build_validation(val_set, val_strategy, np.random.default_rng(s_val), cfg.mask_token_id)

    opt = Adam(model.params, hp)
    val_metrics, losses = [], []
    best_params, best = None, -np.inf
    step = 0
    for epoch in range(hp.max_epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), hp.batch_size):
            batch = train_set.subset(order[start : start + hp.batch_size])
            batch = mask_minibatch(batch, train_strategy, rng, cfg.mask_token_id)
            try:
                loss, grads = model.loss_and_grads(batch.tokens, batch.lengths, batch.labels)
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch} step {step}: {exc}", epoch, step) from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", epoch, step)
            opt.step(model.params, grads)
            epoch_loss += loss
            n_batches += 1
            step += 1
        metric = score_dataset(model, val_built, hp.metric)
        val_metrics.append(metric)
        losses.append(epoch_loss / n_batches)
        log.debug("epoch %d loss %.4f val %.4f", epoch, losses[-1], metric)
        if metric > best:
            best = metric
            best_params = {k: v.copy() for k, v in model.params.items()}

    selected = select_epoch(val_metrics)
    final = TransformerModel(cfg, best_params, {
        "epoch": selected,
        "seed": seed,
        "train_strategy": train_strategy.value,
        "val_strategy": val_strategy.value,
    })
    return TrainReport(val_metrics, losses, selected, final, seed,
                       train_strategy.value, val_strategy.value)


def evaluate(model, dataset, masking_ratio, rng, metric="accuracy"):
    """Task metric after masking ``round(ratio * |maskable|)`` random positions per row."""
    if not 0.0 <= masking_ratio <= 1.0:
        raise ContractViolation(f"masking ratio {masking_ratio} outside [0, 1]")
    counts = masked_count(masking_ratio, dataset.maskable.sum(axis=1))
    tokens = mask_rows(dataset.tokens, dataset.maskable, counts, rng, model.config.mask_token_id)
    return score_dataset(model, dataset.replace_tokens(tokens), metric)
