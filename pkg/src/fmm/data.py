"""Synthetic keyword classification tasks, dataset containers and metrics."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from fmm.exceptions import ConfigurationError, ContractViolation
from fmm.model import Observation

DATASET_SCHEMA = "fmm.dataset"
DATASET_VERSION = 1
TASK_KINDS = ("keyword", "redundant")
METRICS = ("accuracy", "macro_f1")


@dataclass(frozen=True)
class TaskConfig:
    """Generator settings.

    ``min_len``/``max_len`` bound the number of non-pad tokens including cls.
    Class ``c`` owns evidence ids ``first_evidence_id + c*evidence_per_class``
    onward; every other non-special id is filler.
    """

    kind: str = "keyword"
    vocab_size: int = 64
    min_len: int = 8
    max_len: int = 16
    num_classes: int = 2
    evidence_per_class: int = 2
    redundancy: int = 1
    priors: tuple = (0.6, 0.4)
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 500
    seed: int = 0
    pad_token_id: int = 0
    cls_token_id: int = 1
    mask_token_id: int = 2
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(float(p) for p in self.priors))
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.kind == "keyword" and self.redundancy != 1:
            raise ConfigurationError("keyword task requires redundancy == 1")
        if self.redundancy < 1:
            raise ConfigurationError("redundancy must be >= 1")
        if len(self.priors) != self.num_classes or abs(sum(self.priors) - 1.0) > 1e-9:
            raise ConfigurationError("priors must have num_classes entries summing to 1")
        if min(self.priors) < 0:
            raise ConfigurationError("priors must be non-negative")
        if not 2 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 2 <= min_len <= max_len")
        if self.min_len - 1 < self.redundancy:
            raise ConfigurationError("min_len too short to hold the evidence copies")
        if len(self.filler_ids) < 1:
            raise ConfigurationError(
                f"vocab_size={self.vocab_size} too small for {self.num_classes} disjoint "
                f"evidence sets of size {self.evidence_per_class} plus filler"
            )

    @property
    def special_ids(self):
        return (self.pad_token_id, self.cls_token_id, self.mask_token_id)

    @property
    def first_evidence_id(self):
        return max(self.special_ids) + 1

    def evidence_ids(self, cls):
        start = self.first_evidence_id + cls * self.evidence_per_class
        return tuple(range(start, start + self.evidence_per_class))

    @property
    def filler_ids(self):
        start = self.first_evidence_id + self.num_classes * self.evidence_per_class
        return tuple(range(start, self.vocab_size))

    @property
    def task_name(self):
        return self.name or f"{self.kind}-r{self.redundancy}"

    def to_dict(self):
        d = asdict(self)
        d["priors"] = list(self.priors)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    """Column-oriented observations: padded token ids plus per-row metadata."""

    tokens: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    maskable: np.ndarray
    split: str = "test"
    task: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_observations(cls, observations, split="test", task=None, max_len=None, pad_token_id=0):
        T = max_len or max(len(o.tokens) for o in observations)
        n = len(observations)
        tokens = np.full((n, T), pad_token_id, dtype=np.int64)
        maskable = np.zeros((n, T), dtype=bool)
        for i, o in enumerate(observations):
            tokens[i, : len(o.tokens)] = o.tokens
            maskable[i, list(o.maskable)] = True
        return cls(
            tokens,
            np.array([o.length for o in observations], dtype=np.int64),
            np.array([o.label for o in observations], dtype=np.int64),
            maskable,
            split,
            dict(task or {}),
        )

    def observation(self, i):
        L = int(self.lengths[i])
        return Observation(
            tuple(int(t) for t in self.tokens[i]),
            int(self.labels[i]),
            tuple(int(p) for p in np.flatnonzero(self.maskable[i])),
            L,
        )

    def observations(self):
        return [self.observation(i) for i in range(len(self))]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.tokens[idx], self.lengths[idx], self.labels[idx], self.maskable[idx],
            self.split, dict(self.task),
        )

    def replace_tokens(self, tokens):
        return Dataset(tokens, self.lengths, self.labels, self.maskable, self.split, dict(self.task))

    def copy(self):
        return self.replace_tokens(self.tokens.copy())

    @staticmethod
    def concatenate(parts):
        first = parts[0]
        return Dataset(
            np.concatenate([p.tokens for p in parts]),
            np.concatenate([p.lengths for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.maskable for p in parts]),
            first.split,
            dict(first.task),
        )

    @property
    def num_classes(self):
        return int(self.task.get("num_classes", int(self.labels.max()) + 1))


def _generate_split(cfg, n, rng, split):
    T = cfg.max_len
    tokens = np.full((n, T), cfg.pad_token_id, dtype=np.int64)
    maskable = np.zeros((n, T), dtype=bool)
    labels = rng.choice(cfg.num_classes, size=n, p=cfg.priors)
    # drawn independently of the label so that length carries no class signal
    lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=n)
    filler = np.asarray(cfg.filler_ids)
    for i in range(n):
        L = int(lengths[i])
        tokens[i, 0] = cfg.cls_token_id
        tokens[i, 1:L] = rng.choice(filler, size=L - 1)
        where = 1 + rng.choice(L - 1, size=cfg.redundancy, replace=False)
        tokens[i, where] = rng.choice(cfg.evidence_ids(int(labels[i])))
        maskable[i, 1:L] = True
    return Dataset(tokens, lengths.astype(np.int64), labels.astype(np.int64), maskable, split, cfg.to_dict())


def generate(task_config):
    """Return ``(train, validation, test)`` datasets; each split has its own RNG stream."""
    streams = np.random.SeedSequence(task_config.seed).spawn(3)
    sizes = (task_config.n_train, task_config.n_val, task_config.n_test)
    names = ("train", "validation", "test")
    return tuple(
        _generate_split(task_config, n, np.random.default_rng(s), name)
        for s, n, name in zip(streams, sizes, names)
    )


def evaluate_metric(predictions, labels, metric="accuracy", num_classes=None):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractViolation(
            f"predictions {predictions.shape} and labels {labels.shape} differ in length"
        )
    if labels.size == 0:
        raise ContractViolation("empty input")
    if metric == "accuracy":
        return float(np.mean(predictions == labels))
    if metric == "macro_f1":
        if num_classes is None:
            num_classes = int(max(predictions.max(), labels.max())) + 1
        f1 = np.zeros(num_classes)
        for c in range(num_classes):
            tp = np.sum((predictions == c) & (labels == c))
            fp = np.sum((predictions == c) & (labels != c))
            fn = np.sum((predictions != c) & (labels == c))
            denom = 2 * tp + fp + fn
            f1[c] = 2 * tp / denom if denom else 0.0
        return float(f1.mean())
    raise ConfigurationError(f"unknown metric {metric!r}")


def majority_class(labels, num_classes=None):
    counts = np.bincount(np.asarray(labels), minlength=num_classes or 0)
    return int(np.argmax(counts))


def class_majority(dataset, metric="accuracy"):
    """Score of always predicting the most frequent class (ties to the lowest index)."""
    if len(dataset) == 0:
        raise ContractViolation("empty dataset")
    c = majority_class(dataset.labels, dataset.num_classes)
    preds = np.full_like(dataset.labels, c)
    return evaluate_metric(preds, dataset.labels, metric, dataset.num_classes)


# -- serialization ---------------------------------------------------------


def dumps_dataset(dataset):
    header = {
        "schema": DATASET_SCHEMA,
        "version": DATASET_VERSION,
        "split": dataset.split,
        "n": len(dataset),
        "max_len": int(dataset.tokens.shape[1]),
        "task": dataset.task,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(dataset)):
        L = int(dataset.lengths[i])
        lines.append(json.dumps({
            "tokens": [int(t) for t in dataset.tokens[i, :L]],
            "label": int(dataset.labels[i]),
            "split": dataset.split,
            "maskable": [int(p) for p in np.flatnonzero(dataset.maskable[i])],
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads_dataset(text):
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA or header.get("version") != DATASET_VERSION:
        raise ConfigurationError(f"unsupported dataset header {header}")
    task = header["task"]
    pad = task.get("pad_token_id", 0)
    T = header["max_len"]
    n = len(lines) - 1
    tokens = np.full((n, T), pad, dtype=np.int64)
    maskable = np.zeros((n, T), dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        rec = json.loads(line)
        toks = rec["tokens"]
        tokens[i, : len(toks)] = toks
        lengths[i] = len(toks)
        labels[i] = rec["label"]
        maskable[i, rec["maskable"]] = True
    return Dataset(tokens, lengths, labels, maskable, header["split"], task)
