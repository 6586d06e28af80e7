"""Recursive erasure faithfulness: masking curves, ACU/RACU and BCa intervals."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from fmm.data import evaluate_metric
from fmm.exceptions import ContractViolation, UndefinedNormalizerError
from fmm.importance import get_measure
from fmm.masf import dataset_pvalue, masf_pvalues
from fmm.training import masked_count, predict_dataset

DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(11))
NORMALIZER_TOL = 1e-9


@dataclass
class MaskingCurve:
    ratios: list
    performance: list
    measure: str
    dataset: str = ""
    seed: int = 0
    recursive: bool = True
    pvalues: list = field(default_factory=list)
    alpha: float = 0.05

    def __post_init__(self):
        if len(self.ratios) != len(self.performance):
            raise ContractViolation("ratios and performance differ in length")
        x = np.asarray(self.ratios, dtype=float)
        if len(x) < 2 or np.any(np.diff(x) <= 0) or x[0] != 0.0 or x[-1] != 1.0:
            raise ContractViolation("ratios must increase strictly from 0 to 1")

    @property
    def ood_flagged(self):
        return any(p is not None and p < self.alpha for p in self.pvalues)

    def to_dict(self):
        return {
            "measure": self.measure,
            "dataset": self.dataset,
            "seed": self.seed,
            "recursive": self.recursive,
            "ratios": [float(r) for r in self.ratios],
            "performance": [float(p) for p in self.performance],
            "masf_pvalues": [None if p is None else float(p) for p in self.pvalues],
            "alpha": self.alpha,
            "ood_flagged": self.ood_flagged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["ratios"], d["performance"], d["measure"], d.get("dataset", ""),
                   d.get("seed", 0), d.get("recursive", True), d.get("masf_pvalues", []),
                   d.get("alpha", 0.05))


def masking_curve(model, dataset, measure, recursive=None, calibration=None, rng=None,
                  ratios=DEFAULT_RATIOS, metric="accuracy", alpha=0.05, seed=0,
                  return_masks=False):
    """Performance as the most important tokens are masked in cumulative steps.

    At each step the cumulative masked count is ``round(ratio * |maskable|)``.
    With ``recursive`` the explanation is recomputed on the current masked
    input before every step; otherwise the ranking from the unmasked input
    is consumed in order.
    """
    m = get_measure(measure) if isinstance(measure, str) else measure
    if recursive is None:
        recursive = m.recursive
    rng = np.random.default_rng(seed) if rng is None else rng
    mask_id = model.config.mask_token_id
    tokens = dataset.tokens.copy()
    lengths = dataset.lengths
    maskable = dataset.maskable
    n_maskable = maskable.sum(axis=1)
    masked = np.zeros_like(maskable)
    scores = None
    perf, pvals, history = [], [], []
    for ratio in ratios:
        need = masked_count(ratio, n_maskable) - masked.sum(axis=1)
        if np.any(need > 0):
            if scores is None or recursive:
                scores = m.scores(model, tokens, lengths, maskable, rng)
            eligible = maskable & ~masked
            key = np.where(eligible, -np.nan_to_num(scores, nan=-np.inf), np.inf)
            order = np.argsort(key, axis=1, kind="stable")
            rank = np.empty_like(order)
            np.put_along_axis(rank, order, np.arange(order.shape[1])[None, :], axis=1)
            pick = eligible & (rank < need[:, None])
            masked |= pick
            tokens[pick] = mask_id
        current = dataset.replace_tokens(tokens.copy())
        preds = predict_dataset(model, current)
        perf.append(evaluate_metric(preds, dataset.labels, metric, dataset.num_classes))
        if calibration is not None:
            pvals.append(dataset_pvalue(masf_pvalues(calibration, model, current)))
        else:
            pvals.append(None)
        if return_masks:
            history.append(masked.copy())
    curve = MaskingCurve(list(ratios), perf, m.id, dataset.task.get("name", ""), seed,
                         bool(recursive), pvals, alpha)
    return (curve, history) if return_masks else curve


def _xy(curve):
    if hasattr(curve, "performance"):
        return np.asarray(curve.ratios, dtype=float), np.asarray(curve.performance, dtype=float)
    return np.asarray(curve[0], dtype=float), np.asarray(curve[1], dtype=float)


def _arrays(curve, baseline):
    x, p = _xy(curve)
    xb, b = _xy(baseline)
    if x.shape != xb.shape or np.any(x != xb):
        raise ContractViolation("curve and baseline use different ratio grids")
    return x, p, b


def _trapezoid(x, delta):
    dx = np.diff(x)
    return float(np.sum(0.5 * dx * (delta[:-1] + delta[1:])))


def acu(curve, baseline):
    """Trapezoid area between the baseline and the measure's curve.

    Curves are objects with ``ratios``/``performance`` or ``(ratios, performance)``
    pairs. Positive when the measure degrades performance faster than the baseline.
    """
    x, p, b = _arrays(curve, baseline)
    return _trapezoid(x, b - p)


def racu_normalizer(baseline):
    x, b = _xy(baseline)
    return _trapezoid(x, b - b[-1])


def racu(curve, baseline):
    """ACU divided by the area of the explanation that reaches 100%-masked performance at once."""
    norm = racu_normalizer(baseline)
    if norm <= NORMALIZER_TOL:
        raise UndefinedNormalizerError(f"baseline normalizer {norm:.3g} is not positive")
    return acu(curve, baseline) / norm


def bca_interval(values, level=0.95, resamples=10_000, rng=None):
    """Bias-corrected and accelerated bootstrap interval for the mean."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ContractViolation("need at least two values")
    theta = x.mean()
    if np.all(x == x[0]):
        return float(theta), float(theta)
    rng = np.random.default_rng(0) if rng is None else rng
    n = x.size
    boot = np.empty(resamples)
    chunk = 4096
    for start in range(0, resamples, chunk):
        stop = min(start + chunk, resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        boot[start:stop] = x[idx].mean(axis=1)

    # ties with the observed mean count half, so symmetric data gets z0 = 0
    frac = np.mean(boot < theta) + 0.5 * np.mean(boot == theta)
    frac = np.clip(frac, 1.0 / (resamples + 1), 1.0 - 1.0 / (resamples + 1))
    z0 = ndtri(frac)

    jack = (x.sum() - x) / (n - 1)
    d = jack.mean() - jack
    denom = 6.0 * (d**2).sum() ** 1.5
    a = (d**3).sum() / denom if denom > 0 else 0.0

    alpha = (1.0 - level) / 2.0
    z = ndtri(np.array([alpha, 1.0 - alpha]))
    adj = ndtr(z0 + (z0 + z) / (1.0 - a * (z0 + z)))
    lo, hi = np.quantile(boot, adj)
    return float(lo), float(hi)


def mean_across_tasks(values):
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ContractViolation("no task values to average")
    return float(values.mean())


def _num(v):
    # JSON has no NaN; undefined values serialize as null
    v = float(v)
    return v if np.isfinite(v) else None


@dataclass
class FaithfulnessReport:
    measure: str
    acu: list
    racu: list
    seeds: list
    acu_mean: float = float("nan")
    racu_mean: float = float("nan")
    acu_interval: tuple = (float("nan"), float("nan"))
    racu_interval: tuple = (float("nan"), float("nan"))
    baseline: str = "random"

    @classmethod
    def from_curves(cls, measure, curves, baselines, seeds, rng=None, level=0.95, resamples=10_000):
        """Per-seed ACU/RACU plus BCa intervals.

        A seed whose baseline is flat has no RACU; it is stored as NaN and
        the RACU summary is then left undefined as well.
        """
        acus = [acu(c, b) for c, b in zip(curves, baselines)]
        racus = []
        for c, b in zip(curves, baselines):
            try:
                racus.append(racu(c, b))
            except UndefinedNormalizerError:
                racus.append(float("nan"))
        racu_ok = bool(np.all(np.isfinite(racus)))
        rep = cls(measure, acus, racus, list(seeds), float(np.mean(acus)),
                  float(np.mean(racus)) if racu_ok else float("nan"))
        if len(acus) >= 2:
            rng = np.random.default_rng(0) if rng is None else rng
            rep.acu_interval = bca_interval(acus, level, resamples, rng)
            if racu_ok:
                rep.racu_interval = bca_interval(racus, level, resamples, rng)
        return rep

    def to_dict(self):
        return {
            "measure": self.measure,
            "baseline": self.baseline,
            "seeds": list(self.seeds),
            "acu": [_num(v) for v in self.acu],
            "racu": [_num(v) for v in self.racu],
            "acu_mean": _num(self.acu_mean),
            "racu_mean": _num(self.racu_mean),
            "acu_interval": [_num(v) for v in self.acu_interval],
            "racu_interval": [_num(v) for v in self.racu_interval],
        }
