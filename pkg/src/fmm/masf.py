"""Max-Simes-Fisher in-distribution test over layer-normalized embeddings.

Calibration runs the model on a validation set that went through the same
masking transformation as training, then builds three tiers of empirical
CDFs:

1. one per (layer, hidden unit) over the sequence-max activation,
2. one per layer over the Simes combination of tier-1 two-sided p-values,
3. one over the Fisher statistic of the tier-2 lower-tail p-values.

Every CDF-derived p-value is clamped to ``[1/(n+1), 1]`` so Fisher never
sees ``log(0)``.
"""

from dataclasses import dataclass, field

import numpy as np

from fmm.exceptions import CalibrationError, ConfigurationError, ContractViolation
from fmm.training import ValStrategy, build_validation

MIN_CALIBRATION_SIZE = 100


@dataclass(frozen=True)
class EmpiricalCDF:
    samples: np.ndarray

    @property
    def n(self):
        return self.samples.shape[-1]

    def lookup(self, z):
        """Fraction of samples strictly below ``z``."""
        return np.searchsorted(self.samples, z, side="left") / self.n


def build_cdf(samples):
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ContractViolation("cannot build a CDF from zero samples")
    if not np.all(np.isfinite(samples)):
        raise ContractViolation("CDF samples must be finite")
    return EmpiricalCDF(np.sort(samples, kind="stable"))


def _clamp(p, n):
    return np.clip(p, 1.0 / (n + 1), 1.0)


def two_sided_pvalue(cdf, z):
    F = cdf.lookup(z)
    return _clamp(np.minimum(F, 1.0 - F), cdf.n)


def lower_tail_pvalue(cdf, z):
    return _clamp(cdf.lookup(z), cdf.n)


def upper_tail_pvalue(cdf, z):
    return _clamp(1.0 - cdf.lookup(z), cdf.n)


def _check_pvalues(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or p.shape[-1] == 0:
        raise ContractViolation("need at least one p-value")
    if np.any(~(p > 0.0)) or np.any(p > 1.0):
        raise ContractViolation("p-values must lie in (0, 1]")
    return p


def simes(pvalues, axis=-1):
    """Simes combination ``min(1, min_i m * p_(i) / i)`` along ``axis``."""
    p = np.moveaxis(_check_pvalues(pvalues), axis, -1)
    m = p.shape[-1]
    ranked = np.sort(p, axis=-1) * m / np.arange(1, m + 1)
    out = np.minimum(ranked.min(axis=-1), 1.0)
    return float(out) if out.ndim == 0 else out


def fisher_statistic(pvalues, axis=-1):
    """``-2 * sum(log p)``; larger means more extreme."""
    p = _check_pvalues(pvalues)
    out = -2.0 * np.log(p).sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def dataset_pvalue(pvalues):
    return simes(np.asarray(pvalues, dtype=np.float64).ravel())


def sequence_max(traces, lengths):
    """Max over valid positions: (n, L, T, H) traces -> (n, L, H)."""
    T = traces.shape[2]
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    masked = np.where(valid[:, None, :, None], traces, -np.inf)
    return masked.max(axis=2)


def _batched_lookup(sorted_tables, z):
    """Strict-below fractions for per-column tables.

    ``sorted_tables`` is (..., n) and ``z`` is (m, ...). Returns (m, ...).
    """
    lead = sorted_tables.shape[:-1]
    n = sorted_tables.shape[-1]
    flat_tab = sorted_tables.reshape(-1, n)
    flat_z = z.reshape(z.shape[0], -1)
    out = np.empty_like(flat_z)
    for j in range(flat_tab.shape[0]):
        out[:, j] = np.searchsorted(flat_tab[j], flat_z[:, j], side="left")
    return (out / n).reshape((z.shape[0],) + lead)


@dataclass
class MaSFCalibration:
    """Sorted sample tables for all three tiers plus provenance."""

    stage1: np.ndarray  # (L, H, n)
    stage2: np.ndarray  # (L, n)
    stage3: np.ndarray  # (n,)
    provenance: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.stage3.shape[0]

    @property
    def num_layers(self):
        return self.stage1.shape[0]

    @property
    def hidden_dim(self):
        return self.stage1.shape[1]

    def stage1_cdfs(self):
        return [[EmpiricalCDF(self.stage1[l, h]) for h in range(self.hidden_dim)]
                for l in range(self.num_layers)]

    def stage2_cdfs(self):
        return [EmpiricalCDF(self.stage2[l]) for l in range(self.num_layers)]

    def stage3_cdf(self):
        return EmpiricalCDF(self.stage3)

    def layer_simes(self, stats):
        F = _batched_lookup(self.stage1, stats)
        p1 = _clamp(np.minimum(F, 1.0 - F), self.stage1.shape[-1])
        return simes(p1, axis=-1)

    def fisher(self, simes_values):
        F = _batched_lookup(self.stage2, simes_values)
        p2 = _clamp(F, self.stage2.shape[-1])
        return fisher_statistic(p2, axis=-1)

    def pvalues(self, stats):
        """Per-observation p-values from sequence-max statistics (m, L, H)."""
        stats = np.asarray(stats, dtype=np.float64)
        if stats.ndim != 3 or stats.shape[1:] != self.stage1.shape[:2]:
            raise ContractViolation(
                f"statistics shape {stats.shape[1:]} does not match calibration "
                f"{self.stage1.shape[:2]}"
            )
        fisher = np.atleast_1d(self.fisher(np.atleast_2d(self.layer_simes(stats))))
        F = np.searchsorted(self.stage3, fisher, side="left") / self.n
        return _clamp(1.0 - F, self.n)


def fit_calibration(stats, provenance=None):
    """Build all three CDF tiers from calibration statistics (n, L, H)."""
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 3:
        raise ContractViolation("calibration statistics must be (n, L, H)")
    if not np.all(np.isfinite(stats)):
        raise ContractViolation("calibration statistics must be finite")
    stage1 = np.sort(np.moveaxis(stats, 0, -1), axis=-1, kind="stable")
    cal = MaSFCalibration(stage1, np.empty((stats.shape[1], 0)), np.empty(0), dict(provenance or {}))
    simes_values = cal.layer_simes(stats)  # (n, L)
    cal.stage2 = np.sort(simes_values.T, axis=-1, kind="stable")
    fisher = cal.fisher(simes_values)
    cal.stage3 = np.sort(fisher, kind="stable")
    return cal


def dataset_statistics(model, dataset, batch_size=256):
    """Sequence-max statistics (n, L, H) for every row of ``dataset``."""
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        traces = model.traces(dataset.tokens[sl], dataset.lengths[sl])
        out.append(sequence_max(traces, dataset.lengths[sl]))
    return np.concatenate(out)


def masf_fit(model, validation_dataset, rng, strategy=None, min_size=MIN_CALIBRATION_SIZE):
    """Calibrate on ``validation_dataset`` after the validation masking transformation.

    ``strategy`` defaults to the validation strategy recorded on the model.
    """
    if strategy is None:
        strategy = model.metadata.get("val_strategy", ValStrategy.USE_BOTH.value)
    if len(validation_dataset) < min_size:
        raise CalibrationError(
            f"validation set has {len(validation_dataset)} observations; need >= {min_size}"
        )
    built = build_validation(validation_dataset, strategy, rng, model.config.mask_token_id)
    stats = dataset_statistics(model, built)
    return fit_calibration(stats, {
        "strategy": ValStrategy(strategy).value,
        "n_observations": len(built),
        "split": validation_dataset.split,
    })


def masf_pvalue(calibration, trace):
    """p-value for a single :class:`~fmm.model.EmbeddingTrace`."""
    acts = np.asarray(trace.activations)
    if acts.ndim != 3 or acts.shape[0] != calibration.num_layers or acts.shape[2] != calibration.hidden_dim:
        raise ContractViolation(f"trace shape {acts.shape} does not match calibration")
    stats = sequence_max(acts[None], [trace.valid_len])
    return float(calibration.pvalues(stats)[0])


def masf_pvalues(calibration, model, dataset):
    if model.config.num_layers != calibration.num_layers or model.config.hidden_dim != calibration.hidden_dim:
        raise ConfigurationError("model and calibration dimensions differ")
    return calibration.pvalues(dataset_statistics(model, dataset))
