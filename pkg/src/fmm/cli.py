"""``fmm`` command line.

Every subcommand takes ``--config``; results go under ``--out``, else the
config's ``output_dir``, else ``$FMM_OUTPUT_ROOT``, else ``./runs``. Failures
print one JSON error record on stderr and exit with status 1 (2 for usage).
"""

import json
import logging
import sys

import click

from fmm import io, pipeline, report
from fmm.config import OUTPUT_ROOT_ENV, load_config
from fmm.exceptions import FMMError


def _load(config, seed_override=None, alpha=None, out=None):
    return load_config(config).with_overrides(seed=seed_override, alpha=alpha, output_dir=out)


def _fail(exc, command):
    record = exc.to_record() if isinstance(exc, FMMError) else {"error": type(exc).__name__, "message": str(exc)}
    record["command"] = command
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(1)


def _run(command, fn):
    try:
        for path in fn() or ():
            click.echo(str(path))
    except FMMError as exc:
        _fail(exc, command)
    except (OSError, ValueError, KeyError) as exc:
        _fail(exc, command)


config_opt = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                          help="YAML experiment config.")
seed_opt = click.option("--seed-override", type=int, default=None, help="Run a single seed instead of the config's list.")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None,
                       help=f"Output root (default: config output_dir, then ${OUTPUT_ROOT_ENV}, then ./runs).")
alpha_opt = click.option("--alpha", type=float, default=None, help="OOD significance level.")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Masked fine-tuning, MaSF OOD checks and faithfulness metrics."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@config_opt
@seed_opt
@out_opt
def gen_data(config, seed_override, out):
    """Generate the synthetic train/validation/test splits."""
    _run("gen-data", lambda: pipeline.gen_data(_load(config, seed_override, None, out)))


@main.command("train")
@config_opt
@seed_opt
@out_opt
def train(config, seed_override, out):
    """Fine-tune one model per (strategy pair, seed)."""
    _run("train", lambda: pipeline.train_models(_load(config, seed_override, None, out)))


@main.command("ood")
@config_opt
@seed_opt
@out_opt
@alpha_opt
def ood(config, seed_override, out, alpha):
    """Calibrate MaSF and score masked test sets."""

    def go():
        cfg = _load(config, seed_override, alpha, out)
        rep = pipeline.run_ood(cfg)
        paths = pipeline.Paths(cfg.output_path())
        svg, table = report.ood_outputs(cfg, rep)
        io.atomic_write(paths.root / "ood" / "fig3_ood_pvalues.svg", svg)
        io.atomic_write(paths.root / "ood" / "table_ood.csv", table)
        return [paths.ood_report, paths.root / "ood" / "fig3_ood_pvalues.svg", paths.root / "ood" / "table_ood.csv"]

    _run("ood", go)


@main.command("explain")
@config_opt
@seed_opt
@out_opt
@click.option("--measure", required=True, help="Importance measure id, e.g. loo_abs or beam.")
def explain(config, seed_override, out, measure):
    """Write per-observation scores and masking orders for one measure."""
    _run("explain", lambda: [pipeline.run_explain(_load(config, seed_override, None, out), measure)])


@main.command("faithfulness")
@config_opt
@seed_opt
@out_opt
@alpha_opt
def faithfulness(config, seed_override, out, alpha):
    """Masking curves plus the ACU/RACU table."""

    def go():
        cfg = _load(config, seed_override, alpha, out)
        summary = pipeline.run_faithfulness(cfg)
        paths = pipeline.Paths(cfg.output_path())
        table = paths.root / "faithfulness" / "table1_faithfulness.csv"
        io.atomic_write(table, report.faithfulness_table(summary))
        return [paths.curves, paths.faithfulness, table]

    _run("faithfulness", go)


@main.command("report")
@config_opt
@seed_opt
@out_opt
@alpha_opt
def report_cmd(config, seed_override, out, alpha):
    """Consolidated JSON report, SVG figures and CSV tables."""
    _run("report", lambda: report.build_report(_load(config, seed_override, alpha, out)))


if __name__ == "__main__":
    main()
