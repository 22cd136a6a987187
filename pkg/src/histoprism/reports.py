"""Text, CSV and SVG renderings of evaluation results."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from typing import Sequence

import numpy as np

from . import metrics as M

LEVEL_NOTE = ("variance levels: thresholds are deciles of the positive per-gene variances of each split's "
              "test patches (a reconstruction); a pathway's level is the mean of its per-split levels")


def _fmt(x: float | None, nd: int = 3) -> str:
    return "NA" if x is None else f"{x:.{nd}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], right_from: int = 1) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    out = []
    for r in [header, *rows]:
        cells = [str(c).ljust(w) if i < right_from else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        out.append("  ".join(cells).rstrip())
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# HVG macro / micro


def pcc_table_text(report: M.MacroMicroReport, panel: M.HvgPanel, model: str = "model") -> str:
    head = [f"# {model}: PCC over the top-{panel.n} HVGs of each cancer type (union panel: {len(panel.union)} genes)",
            "# sd(macro): population sd over splits (Average row: over cancer types); "
            "sd(micro): population sd over slides"]
    rows = [[r.label, str(r.n_slides), _fmt(r.macro), _fmt(r.sd_macro), _fmt(r.micro), _fmt(r.sd_micro)]
            for r in [*report.per_cancer, report.overall]]
    return "\n".join(head) + "\n" + _table(["Cancer", "Slides", "Macro", "sd(macro)", "Micro", "sd(micro)"], rows)


def pcc_table_csv(report: M.MacroMicroReport) -> str:
    rows = [[r.label, r.n_slides, repr(r.macro), repr(r.sd_macro), repr(r.micro), repr(r.sd_micro), r.n_units]
            for r in [*report.per_cancer, report.overall]]
    return _csv(["cancer", "n_slides", "macro", "sd_macro", "micro", "sd_micro", "n_macro_units"], rows)


def slide_scores_csv(report: M.MacroMicroReport) -> str:
    keys = sorted(report.excluded_genes)
    return _csv(["slide_key", "hvg_pcc", "n_undefined_genes"],
                [[k, repr(report.slide_scores[k]) if k in report.slide_scores else "", report.excluded_genes[k]]
                 for k in keys])


# ---------------------------------------------------------------------------
# GPC


def gpc_text(report: M.GpcReport, other: M.GpcReport | None = None, names: tuple[str, str] = ("model", "baseline")
             ) -> str:
    other_rows = other.by_name() if other is not None else {}
    header = ["Pathway", "#Genes", "#Genes(file)", "AvgVar", "Level", names[0]]
    if other is not None:
        header.append(names[1])
    groups: dict[str, list[list[str]]] = defaultdict(list)
    for r in report.rows:
        row = [r.name, str(r.gene_count), str(r.file_gene_count), _fmt(r.mean_variance, 4),
               "NA" if r.variance_level is None else f"{r.variance_level:g}", _fmt(r.score)]
        if other is not None:
            row.append(_fmt(other_rows[r.name].score))
        groups[M.source_group(r.source)].append(row)
    parts = [f"# {LEVEL_NOTE}", f"# scores average over {report.n_slides} slides; undefined PCCs excluded"]
    if other is not None:
        rates = M.gpc_win_rate(report, other)
        parts.append("# win rate of " + names[0] + " over " + names[1] + ": "
                     + ", ".join(f"{g} {100 * v:.1f}%" for g, v in rates.items()))
    text = "\n".join(parts) + "\n"
    for g in sorted(groups):
        text += f"\n[{g}]\n" + _table(header, groups[g])
    return text


def gpc_csv(report: M.GpcReport) -> str:
    rows = [[r.name, r.source.value, r.gene_count, r.file_gene_count,
             "" if r.mean_variance is None else repr(r.mean_variance),
             "" if r.variance_level is None else repr(r.variance_level),
             "" if r.score is None else repr(r.score), r.n_slides_used, r.n_excluded] for r in report.rows]
    return _csv(["pathway", "source", "n_genes", "n_genes_file", "avg_variance", "variance_level", "score",
                 "n_slides_used", "n_undefined_pcc"], rows)


def thresholds_text(levels: Sequence[M.VarianceLevels]) -> str:
    header = ["Level"] + [f"Split-{k}" for k in range(len(levels))]
    rows = [[str(i + 1)] + [f"> {lv.thresholds[i]:.4f}" for lv in levels] for i in range(levels[0].n_levels)]
    return f"# {LEVEL_NOTE}\n" + _table(header, rows)


def level_means(report: M.GpcReport) -> dict[float, float]:
    """Mean scored GPC per (possibly half-integer) variance level."""
    acc: dict[float, list[float]] = defaultdict(list)
    for r in report.rows:
        if r.score is not None and r.variance_level is not None:
            acc[r.variance_level].append(r.score)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def plot_gpc_by_level(reports: dict[str, M.GpcReport], path) -> None:
    from .plots import figure, save_svg

    fig, (ax,) = figure(1, 1, (5.5, 3.6))
    for name, rep in reports.items():
        means = level_means(rep)
        ax.plot(list(means), list(means.values()), marker="o", label=name)
    ax.set_xlabel("variance level")
    ax.set_ylabel("mean GPC score")
    ax.legend()
    save_svg(fig, path)


# ---------------------------------------------------------------------------
# clustering


def cluster_text(res: M.ClusterEval, seed: int) -> str:
    return (f"# k-means on slide-mean predicted profiles, k = {res.k}, seed = {seed}\n"
            + _table(["Metric", "Value"], [["AMI", _fmt(res.ami)], ["ARI", _fmt(res.ari)]]))


def cluster_csv(res: M.ClusterEval, keys: Sequence[str]) -> str:
    return _csv(["slide_key", "cancer", "cluster"], [[k, t, int(c)] for k, t, c in zip(keys, res.truth, res.labels)])
