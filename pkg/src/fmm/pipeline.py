"""Experiment stages behind the CLI.

Each stage reads its prerequisites from the output directory, checks they
were produced under the same config hash, and writes its own artifacts.
Random streams are derived from ``(seed, stage, ...)`` so every stage is
reproducible in isolation.
"""

import logging
from pathlib import Path

import numpy as np

from fmm import io
from fmm.data import class_majority, dumps_dataset, generate, loads_dataset
from fmm.exceptions import DependencyError
from fmm.faithfulness import FaithfulnessReport, MaskingCurve, masking_curve
from fmm.importance import MEASURES, get_measure, order_from_scores
from fmm.masf import dataset_pvalue, masf_fit, masf_pvalues
from fmm.training import mask_rows, masked_count, score_dataset, train

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")

# stage tags for RNG derivation
_CALIBRATE, _OOD_MASK, _BASELINE, _RANDOM_MEASURE, _MEASURE = 101, 102, 200, 201, 202


def _strategy_dir(pair):
    return f"{pair[0]}__{pair[1]}"


class Paths:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, split):
        return self.root / "data" / f"{split}.jsonl"

    def checkpoint(self, pair, seed):
        return self.root / "models" / _strategy_dir(pair) / f"seed{seed}.ckpt"

    def train_report(self, pair):
        return self.root / "models" / _strategy_dir(pair) / "train_report.json"

    def calibration(self, pair, seed):
        return self.root / "ood" / _strategy_dir(pair) / f"seed{seed}.calib"

    @property
    def ood_report(self):
        return self.root / "ood" / "ood_report.json"

    def explanations(self, measure):
        return self.root / "explain" / f"{measure}.jsonl"

    @property
    def curves(self):
        return self.root / "faithfulness" / "curves.jsonl"

    @property
    def faithfulness(self):
        return self.root / "faithfulness" / "results.json"

    @property
    def report_dir(self):
        return self.root / "report"


# -- loading helpers ---------------------------------------------------------


def load_split(cfg, split):
    path = Paths(cfg.output_path()).data(split)
    if not path.exists():
        raise DependencyError(f"missing dataset {path}; run `fmm gen-data` first", "gen-data")
    ds = loads_dataset(path.read_text())
    io.check_hash(ds.task.get("config_hash"), cfg.hash, str(path))
    return ds


def load_model(cfg, pair, seed):
    path = Paths(cfg.output_path()).checkpoint(pair, seed)
    model, meta = io.load_checkpoint(path, producer="train")
    io.check_hash(meta.get("config_hash"), cfg.hash, str(path))
    return model


def load_calibration(cfg, pair, seed):
    path = Paths(cfg.output_path()).calibration(pair, seed)
    cal, meta = io.load_calibration(path, producer="ood")
    io.check_hash(meta.get("config_hash"), cfg.hash, str(path))
    return cal


def faithfulness_subset(cfg, test):
    if cfg.faithfulness_size and cfg.faithfulness_size < len(test):
        return test.subset(np.arange(cfg.faithfulness_size))
    return test


# -- stages ------------------------------------------------------------------


def gen_data(cfg):
    paths = Paths(cfg.output_path())
    out = []
    for ds in generate(cfg.task):
        ds.task["config_hash"] = cfg.hash
        ds.task["name"] = cfg.task.task_name
        io.atomic_write(paths.data(ds.split), dumps_dataset(ds))
        out.append(paths.data(ds.split))
    return out


def train_models(cfg):
    paths = Paths(cfg.output_path())
    train_set = load_split(cfg, "train")
    val_set = load_split(cfg, "validation")
    written = []
    for pair in cfg.strategies:
        reports = []
        for seed in cfg.seeds:
            rep = train(cfg.model, (train_set, val_set), pair[0], pair[1], cfg.hyperparams, seed)
            io.save_checkpoint(rep.model, paths.checkpoint(pair, seed), {"config_hash": cfg.hash})
            reports.append(rep.to_dict())
            written.append(paths.checkpoint(pair, seed))
            log.info("trained %s seed %d (epoch %d)", _strategy_dir(pair), seed, rep.selected_epoch)
        io.write_json(paths.train_report(pair), {
            "schema_version": io.SCHEMA_VERSION,
            "config_hash": cfg.hash,
            "strategy": list(pair),
            "runs": reports,
        })
        written.append(paths.train_report(pair))
    return written


def run_ood(cfg):
    """Calibrate MaSF per model and score the test set at every masking ratio."""
    paths = Paths(cfg.output_path())
    val_set = load_split(cfg, "validation")
    test = load_split(cfg, "test")
    n_maskable = test.maskable.sum(axis=1)
    results = []
    for pair in cfg.strategies:
        for seed in cfg.seeds:
            model = load_model(cfg, pair, seed)
            cal = masf_fit(model, val_set, np.random.default_rng([seed, _CALIBRATE]), pair[1])
            io.save_calibration(cal, paths.calibration(pair, seed), {"config_hash": cfg.hash})
            rows = []
            for k, ratio in enumerate(cfg.ood_ratios):
                rng = np.random.default_rng([seed, _OOD_MASK, k])
                tokens = mask_rows(test.tokens, test.maskable, masked_count(ratio, n_maskable),
                                   rng, model.config.mask_token_id)
                masked = test.replace_tokens(tokens)
                p = masf_pvalues(cal, model, masked)
                rows.append({
                    "ratio": float(ratio),
                    "dataset_pvalue": float(dataset_pvalue(p)),
                    "mean_pvalue": float(p.mean()),
                    "performance": score_dataset(model, masked, cfg.metric),
                })
            results.append({"strategy": list(pair), "seed": seed, "ratios": rows})
    report = {
        "schema_version": io.SCHEMA_VERSION,
        "config_hash": cfg.hash,
        "alpha": cfg.alpha,
        "class_majority": class_majority(test, cfg.metric),
        "results": results,
    }
    io.write_json(paths.ood_report, report)
    return report


def _explain_records(cfg, model, data, measure_id, seed):
    m = get_measure(measure_id, cfg.beam_width)
    rng = np.random.default_rng([seed, _MEASURE, sorted(MEASURES).index(measure_id)])
    scores = m.scores(model, data.tokens, data.lengths, data.maskable, rng)
    orders = order_from_scores(scores, data.maskable)
    records = []
    for i in range(len(data)):
        pos = [int(p) for p in np.flatnonzero(data.maskable[i])]
        rec = {"seed": seed, "index": i, "measure": measure_id, "variant": m.variant,
               "positions": pos, "order": list(orders[i])}
        if measure_id != "beam":
            rec["scores"] = [float(scores[i, p]) for p in pos]
        records.append(rec)
    return records


def run_explain(cfg, measure_id):
    paths = Paths(cfg.output_path())
    get_measure(measure_id)
    pair = cfg.primary_strategy
    data = faithfulness_subset(cfg, load_split(cfg, "test"))
    records = []
    for seed in cfg.seeds:
        model = load_model(cfg, pair, seed)
        records.extend(_explain_records(cfg, model, data, measure_id, seed))
    header = {"schema": "fmm.explanations", "schema_version": io.SCHEMA_VERSION,
              "config_hash": cfg.hash, "measure": measure_id, "strategy": list(pair)}
    io.write_jsonl(paths.explanations(measure_id), header, records)
    return paths.explanations(measure_id)


def run_faithfulness(cfg):
    paths = Paths(cfg.output_path())
    pair = cfg.primary_strategy
    for seed in cfg.seeds:  # fail fast, naming the producing command
        load_model(cfg, pair, seed)
        load_calibration(cfg, pair, seed)
    data = faithfulness_subset(cfg, load_split(cfg, "test"))
    curves = []
    for seed in cfg.seeds:
        model = load_model(cfg, pair, seed)
        cal = load_calibration(cfg, pair, seed)
        kw = dict(calibration=cal, metric=cfg.metric, alpha=cfg.alpha, seed=seed)
        curves.append(masking_curve(model, data, "random",
                                    rng=np.random.default_rng([seed, _BASELINE]), **kw).to_dict()
                      | {"role": "baseline"})
        curves.append(masking_curve(model, data, "random",
                                    rng=np.random.default_rng([seed, _RANDOM_MEASURE]), **kw).to_dict()
                      | {"role": "measure"})
        for measure_id in cfg.measures:
            rng = np.random.default_rng([seed, _MEASURE, sorted(MEASURES).index(measure_id)])
            c = masking_curve(model, data, get_measure(measure_id, cfg.beam_width), rng=rng, **kw)
            curves.append(c.to_dict() | {"role": "measure"})
            log.info("curve %s seed %d done", measure_id, seed)
    header = {"schema": "fmm.curves", "schema_version": io.SCHEMA_VERSION,
              "config_hash": cfg.hash, "strategy": list(pair)}
    io.write_jsonl(paths.curves, header, curves)
    results = summarize_curves(cfg, curves)
    io.write_json(paths.faithfulness, results)
    return results


def summarize_curves(cfg, curves):
    """ACU/RACU per measure with BCa intervals, derived only from serialized curves."""
    baselines = {c["seed"]: MaskingCurve.from_dict(c) for c in curves if c["role"] == "baseline"}
    by_measure = {}
    for c in curves:
        if c["role"] == "measure":
            by_measure.setdefault(c["measure"], []).append(MaskingCurve.from_dict(c))
    rows = []
    for measure_id in ["random"] + list(cfg.measures):
        cs = sorted(by_measure.get(measure_id, []), key=lambda c: c.seed)
        if not cs:
            continue
        rep = FaithfulnessReport.from_curves(
            measure_id, cs, [baselines[c.seed] for c in cs], [c.seed for c in cs],
            rng=np.random.default_rng([0, sorted(MEASURES).index(measure_id)]),
            resamples=cfg.bootstrap_resamples,
        )
        row = rep.to_dict()
        row["ood_flagged_seeds"] = [c.seed for c in cs if c.ood_flagged]
        rows.append(row)
    return {"schema_version": io.SCHEMA_VERSION, "config_hash": cfg.hash, "measures": rows}
