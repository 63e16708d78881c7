"""Tabular and graphical rendering of evaluation results.

Every machine-readable table is tab-separated with a one-line schema
header (``# jsguide-<kind> v1``) followed by a column header row.
Undefined values are written as ``NA``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from jsguide.evaluation import METRICS, MetricsReport, WilcoxonResult  # noqa: E402
from jsguide.model import ImportanceTable  # noqa: E402

NA = "NA"


def _fmt(v, digits: int = 4) -> str:
    return NA if v is None else f"{v:.{digits}f}"


def metrics_rows(report: MetricsReport) -> list[list[str]]:
    """One row per (fold, method, repetition) with confusion counts."""
    rows = []
    for r in report.rows:
        m = r.metrics
        rows.append([r.fold, r.method, str(r.repetition), str(m.tp), str(m.fp), str(m.fn),
                     str(m.tn), _fmt(m.precision), _fmt(m.recall), _fmt(m.false_alarm)])
    return rows


def write_metrics_tsv(report: MetricsReport, path: str | Path) -> None:
    header = ["fold", "method", "repetition", "tp", "fp", "fn", "tn", *METRICS]
    lines = ["# jsguide-metrics v1", "\t".join(header)]
    lines += ["\t".join(r) for r in metrics_rows(report)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def summary_rows(report: MetricsReport) -> list[list[str]]:
    """Mean and sd per (method, metric, fold), undefined counts appended."""
    rows = []
    for method in report.methods:
        for metric in METRICS:
            row = [method, metric]
            for fold in report.folds:
                agg = report.aggregate(metric, method, fold)
                row += [_fmt(agg.mean, 3), _fmt(agg.sd, 3), str(agg.n_undefined)]
            rows.append(row)
    return rows


def write_summary_tsv(report: MetricsReport, path: str | Path) -> None:
    header = ["method", "metric"]
    for fold in report.folds:
        header += [f"{fold}_mean", f"{fold}_sd", f"{fold}_undefined"]
    lines = ["# jsguide-summary v1", "\t".join(header)]
    lines += ["\t".join(r) for r in summary_rows(report)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_summary(report: MetricsReport) -> str:
    """Aligned text table: methods down, folds across, ``mean ± sd`` cells."""
    folds = report.folds
    header = ["method", "metric", *folds]
    body = []
    footnotes = 0
    for method in report.methods:
        for metric in METRICS:
            cells = [method, metric]
            for fold in folds:
                agg = report.aggregate(metric, method, fold)
                cell = "undefined" if agg.mean is None else f"{agg.mean:.2f} ± {agg.sd:.2f}"
                if agg.n_undefined and agg.mean is not None:
                    cell += "*"
                    footnotes += 1
                cells.append(cell)
            body.append(cells)
    text = _align([header, *body])
    if footnotes:
        text += "\n* some repetitions had an undefined value and were left out of the mean"
    return text


def wilcoxon_rows(matrix) -> list[list[str]]:
    rows = []
    for ref, other, cells in matrix:
        for metric, res in cells.items():
            if res is None:
                rows.append([ref, other, metric, NA, NA, NA])
            else:
                rows.append([ref, other, metric, f"{res.U:g}", f"{res.p_two_sided:.4g}", res.method])
    return rows


def write_wilcoxon_tsv(matrix, path: str | Path) -> None:
    lines = ["# jsguide-wilcoxon v1", "\t".join(["reference", "method", "metric", "U", "p", "test"])]
    lines += ["\t".join(r) for r in wilcoxon_rows(matrix)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_wilcoxon(matrix, alpha: float = 0.05) -> str:
    header = ["reference", "method", *METRICS]
    body = []
    for ref, other, cells in matrix:
        row = [ref, other]
        for metric in METRICS:
            res: WilcoxonResult | None = cells.get(metric)
            if res is None:
                row.append("n/a")
            else:
                mark = "*" if res.p_two_sided < alpha else ""
                row.append(f"{res.p_two_sided:.3g}{mark}")
        body.append(row)
    return _align([header, *body]) + f"\n* p < {alpha:g}"


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for k, r in enumerate(rows):
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def write_ablation_tsv(ablation: Mapping[float, MetricsReport], path: str | Path) -> None:
    lines = ["# jsguide-ablation v1", "\t".join(["fraction", "metric", "mean", "sd", "undefined"])]
    for frac, rep in sorted(ablation.items()):
        method = rep.methods[0] if rep.methods else ""
        for metric in METRICS:
            agg = rep.aggregate(metric, method)
            lines.append("\t".join([f"{frac:g}", metric, _fmt(agg.mean), _fmt(agg.sd),
                                    str(agg.n_undefined)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# figures

def plot_fold_metrics(report: MetricsReport, path: str | Path) -> None:
    """Grouped bars: one panel per metric, folds on x, one bar per method."""
    folds, methods = report.folds, report.methods
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.4), sharey=True)
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(folds))
    for ax, metric in zip(axes, METRICS):
        for k, method in enumerate(methods):
            aggs = [report.aggregate(metric, method, f) for f in folds]
            means = [a.mean if a.mean is not None else np.nan for a in aggs]
            sds = [a.sd if a.sd is not None else 0.0 for a in aggs]
            ax.bar(x + (k - (len(methods) - 1) / 2) * width, means, width, yerr=sds,
                   label=method, capsize=2)
        ax.set_xticks(x, folds)
        ax.set_title(metric.replace("_", " "))
        ax.set_ylim(0, 1.05)
    axes[0].legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(ablation: Mapping[float, MetricsReport], path: str | Path) -> None:
    """Mean metric versus fraction of top-ranked features kept."""
    fracs = sorted(ablation)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for metric in METRICS:
        means, sds = [], []
        for f in fracs:
            rep = ablation[f]
            agg = rep.aggregate(metric, rep.methods[0]) if rep.methods else None
            means.append(agg.mean if agg and agg.mean is not None else np.nan)
            sds.append(agg.sd if agg and agg.sd is not None else 0.0)
        ax.errorbar([100 * f for f in fracs], means, yerr=sds, marker="o", capsize=2,
                    label=metric.replace("_", " "))
    ax.set_xscale("log")
    ax.set_xticks([100 * f for f in fracs], [f"{100 * f:g}%" for f in fracs])
    ax.set_xlabel("top features kept")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_importance(table: ImportanceTable, path: str | Path, top: int = 20,
                    n_static: int | None = None) -> None:
    """Horizontal bars of the ``top`` features by importance."""
    gains = table.as_dict()
    ids = table.ranked()[:top][::-1]
    vals = [gains[fid] for fid in ids]
    colors = None
    if n_static is not None:
        static = set(table.feature_ids[:n_static])
        colors = ["tab:blue" if fid in static else "tab:orange" for fid in ids]
    fig, ax = plt.subplots(figsize=(5, 0.25 * len(ids) + 1))
    ax.barh(ids, vals, color=colors)
    ax.set_xlabel("importance")
    ax.tick_params(axis="y", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
