"""Consolidated report: SVG line/bar plots and CSV tables.

Tables are recomputed from the serialized curves and OOD rows, never from
in-memory state, so every cell can be re-derived from files on disk.
"""

import csv
import datetime
import io as _io
from xml.sax.saxutils import escape

import numpy as np

from fmm import __version__, io
from fmm.faithfulness import MaskingCurve
from fmm.pipeline import Paths, summarize_curves

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

W, H = 640, 400
M_LEFT, M_RIGHT, M_TOP, M_BOTTOM = 60, 170, 40, 50


def _sx(x, x0, x1):
    return M_LEFT + (x - x0) / (x1 - x0) * (W - M_LEFT - M_RIGHT)


def _sy(y, y0, y1):
    return H - M_BOTTOM - (y - y0) / (y1 - y0) * (H - M_TOP - M_BOTTOM)


def _frame(title, xlabel, ylabel, x_range, y_range, ticks_x, ticks_y, log_y=False):
    x0, x1 = x_range
    y0, y1 = y_range
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{M_LEFT}" y1="{H - M_BOTTOM}" x2="{W - M_RIGHT}" y2="{H - M_BOTTOM}" stroke="black"/>',
        f'<line x1="{M_LEFT}" y1="{M_TOP}" x2="{M_LEFT}" y2="{H - M_BOTTOM}" stroke="black"/>',
        f'<text x="{(M_LEFT + W - M_RIGHT) / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{H / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {H / 2:.1f})">'
        f"{escape(ylabel)}</text>",
    ]
    for t in ticks_x:
        x = _sx(t, x0, x1)
        parts.append(f'<line x1="{x:.1f}" y1="{H - M_BOTTOM}" x2="{x:.1f}" y2="{H - M_BOTTOM + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{H - M_BOTTOM + 16}" text-anchor="middle">{t:g}</text>')
    for t in ticks_y:
        y = _sy(np.log10(t) if log_y else t, y0, y1)
        parts.append(f'<line x1="{M_LEFT - 4}" y1="{y:.1f}" x2="{M_LEFT}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{M_LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    return parts


def _legend(parts, labels):
    for k, label in enumerate(labels):
        y = M_TOP + 14 * k
        x = W - M_RIGHT + 10
        parts.append(f'<rect x="{x}" y="{y - 8}" width="10" height="10" fill="{PALETTE[k % len(PALETTE)]}"/>')
        parts.append(f'<text x="{x + 14}" y="{y + 1}">{escape(label)}</text>')


def line_plot(title, xlabel, ylabel, series, y_range=(0.0, 1.0), log_y=False, hline=None):
    """``series`` is a list of ``(label, xs, ys)``."""
    y0, y1 = y_range
    ticks_y = ([10.0**e for e in range(int(y0), int(y1) + 1)] if log_y
               else list(np.round(np.linspace(y0, y1, 6), 3)))
    parts = _frame(title, xlabel, ylabel, (0.0, 1.0), y_range,
                   [round(0.2 * i, 1) for i in range(6)], ticks_y, log_y)
    if hline is not None:
        y = _sy(np.log10(hline) if log_y else hline, y0, y1)
        parts.append(f'<line x1="{M_LEFT}" y1="{y:.1f}" x2="{W - M_RIGHT}" y2="{y:.1f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
    for k, (label, xs, ys) in enumerate(series):
        ys = np.asarray(ys, dtype=float)
        if log_y:
            ys = np.log10(np.clip(ys, 10.0**y0, None))
        pts = " ".join(f"{_sx(x, 0.0, 1.0):.1f},{_sy(y, y0, y1):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{PALETTE[k % len(PALETTE)]}" '
                     f'stroke-width="1.5" points="{pts}"/>')
    _legend(parts, [s[0] for s in series])
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_plot(title, ylabel, bars, hline=None):
    """``bars`` is a list of ``(label, value, lo, hi)``."""
    parts = _frame(title, "", ylabel, (0.0, 1.0), (0.0, 1.0), [], [0, 0.2, 0.4, 0.6, 0.8, 1.0])
    n = max(len(bars), 1)
    width = (W - M_LEFT - M_RIGHT) / n
    for k, (label, value, lo, hi) in enumerate(bars):
        x = M_LEFT + k * width + width * 0.2
        y = _sy(value, 0.0, 1.0)
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{width * 0.6:.1f}" '
                     f'height="{H - M_BOTTOM - y:.1f}" fill="{PALETTE[k % len(PALETTE)]}"/>')
        cx = x + width * 0.3
        parts.append(f'<line x1="{cx:.1f}" y1="{_sy(lo, 0, 1):.1f}" x2="{cx:.1f}" '
                     f'y2="{_sy(hi, 0, 1):.1f}" stroke="black"/>')
        parts.append(f'<text x="{cx:.1f}" y="{H - M_BOTTOM + 16}" text-anchor="middle">{escape(label)}</text>')
    if hline is not None:
        y = _sy(hline, 0.0, 1.0)
        parts.append(f'<line x1="{M_LEFT}" y1="{y:.1f}" x2="{W - M_RIGHT}" y2="{y:.1f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cell(v):
    if v is None:
        return "nan"
    return f"{v:.6f}" if isinstance(v, float) else v


def _csv(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _mean_interval(values):
    from fmm.faithfulness import bca_interval

    values = [float(v) for v in values]
    if len(values) < 2:
        return float(np.mean(values)), float("nan"), float("nan")
    lo, hi = bca_interval(values, rng=np.random.default_rng(0))
    return float(np.mean(values)), lo, hi


def ood_outputs(cfg, ood):
    """Fig. 3 analog (dataset p-value vs masking ratio) and its table."""
    series, rows = [], []
    for pair in cfg.strategies:
        for r in ood["results"]:
            if r["strategy"] != list(pair):
                continue
            xs = [row["ratio"] for row in r["ratios"]]
            ps = [row["dataset_pvalue"] for row in r["ratios"]]
            series.append((f"{pair[0]} s{r['seed']}", xs, ps))
            for row in r["ratios"]:
                rows.append([pair[0], pair[1], r["seed"], row["ratio"], row["dataset_pvalue"],
                             row["mean_pvalue"], row["performance"]])
    svg = line_plot("In-distribution p-values (MaSF, Simes over observations)", "masking ratio",
                    "dataset p-value", series, y_range=(-4.0, 0.0), log_y=True, hline=cfg.alpha)
    table = _csv(["train_strategy", "val_strategy", "seed", "ratio", "dataset_pvalue",
                  "mean_pvalue", "performance"], rows)
    return svg, table


def faithfulness_table(summary):
    """Table 1 analog: ACU/RACU means with BCa intervals."""
    rows = []
    for row in summary["measures"]:
        rows.append([row["measure"], row["acu_mean"], row["acu_interval"][0], row["acu_interval"][1],
                     row["racu_mean"], row["racu_interval"][0], row["racu_interval"][1],
                     len(row["ood_flagged_seeds"])])
    return _csv(["measure", "acu", "acu_lo", "acu_hi", "racu", "racu_lo", "racu_hi",
                 "ood_flagged_seeds"], rows)


def build_report(cfg, timestamp=True):
    paths = Paths(cfg.output_path())
    ood = io.read_json(paths.ood_report, producer="ood")
    io.check_hash(ood["config_hash"], cfg.hash, str(paths.ood_report))
    header, curves = io.read_jsonl(paths.curves, producer="faithfulness")
    io.check_hash(header["config_hash"], cfg.hash, str(paths.curves))
    train_reports = []
    for pair in cfg.strategies:
        tr = io.read_json(paths.train_report(pair), producer="train")
        io.check_hash(tr["config_hash"], cfg.hash, str(paths.train_report(pair)))
        train_reports.append(tr)

    out = paths.report_dir
    files = {}

    # Fig. 2 analog: fully masked performance per strategy
    bars, masked_rows = [], []
    for pair in cfg.strategies:
        full = [r["ratios"][-1]["performance"] for r in ood["results"] if r["strategy"] == list(pair)]
        unmasked = [r["ratios"][0]["performance"] for r in ood["results"] if r["strategy"] == list(pair)]
        mean, lo, hi = _mean_interval(full)
        bars.append((f"{pair[0]}/{pair[1]}", mean, lo if np.isfinite(lo) else mean, hi if np.isfinite(hi) else mean))
        masked_rows.append([f"{pair[0]}", f"{pair[1]}", float(np.mean(unmasked)), mean, lo, hi,
                            float(ood["class_majority"])])
    files["fig2_masked_performance.svg"] = bar_plot(
        "100% masked performance by fine-tuning strategy", cfg.metric, bars, ood["class_majority"])
    files["table_masked_performance.csv"] = _csv(
        ["train_strategy", "val_strategy", "unmasked_mean", "masked100_mean", "masked100_lo",
         "masked100_hi", "class_majority"], masked_rows)

    files["fig3_ood_pvalues.svg"], files["table_ood.csv"] = ood_outputs(cfg, ood)

    # Fig. 4 analog: mean masking curve per measure
    series = []
    grouped = {}
    for c in curves:
        key = "random (baseline)" if c["role"] == "baseline" else c["measure"]
        grouped.setdefault(key, []).append(MaskingCurve.from_dict(c))
    for key, cs in grouped.items():
        xs = cs[0].ratios
        ys = np.mean([c.performance for c in cs], axis=0)
        series.append((key, xs, ys))
    files["fig4_faithfulness_curves.svg"] = line_plot(
        "Performance given masked datasets", "masking ratio", cfg.metric, series)

    # Table 1 analog, recomputed from the curves file
    summary = summarize_curves(cfg, curves)
    files["table1_faithfulness.csv"] = faithfulness_table(summary)

    report = {
        "schema_version": io.SCHEMA_VERSION,
        "config_hash": cfg.hash,
        "provenance": {
            "version": __version__,
            "seeds": list(cfg.seeds),
            "config_hash": cfg.hash,
        },
        "config": cfg.to_dict(),
        "training": train_reports,
        "ood": ood,
        "faithfulness": summary,
        "curves": curves,
        "files": sorted(files),
    }
    if timestamp:
        report["provenance"]["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    files["report.json"] = io.dumps_json(report)
    for name, text in files.items():
        io.atomic_write(out / name, text)
    return [out / name for name in sorted(files)]
