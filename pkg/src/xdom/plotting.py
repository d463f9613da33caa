"""Histogram and summary-table figures drawn from a saved report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DependencyError  # noqa: E402

SCORE_KINDS = ("S_h", "S_d")


def histogram_files(report):
    """``{(split, kind): filename}`` for every histogram the report carries."""
    return {(split, kind): f"hist_{split.replace('+', '_')}_{kind}.png"
            for split in sorted(report["histograms"]) for kind in SCORE_KINDS}


def plot_histogram(hist, title, path):
    edges = np.asarray(hist["edges"])
    widths = np.diff(edges)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], hist["id_counts"], width=widths, align="edge", alpha=0.55, label="ID")
    ax.bar(edges[:-1], hist["ood_counts"], width=widths, align="edge", alpha=0.55, label="OOD")
    ax.set_title(title, fontsize=9)
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_summary_table(rows, path):
    cells = [[r["split"], r["scorer"], r["variant"], f"{r['fpr95']:.3f}", f"{r['auroc']:.3f}",
              f"{r['aupr']:.3f}"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 0.22 * len(cells) + 0.6))
    ax.axis("off")
    table = ax.table(cellText=cells, colLabels=["split", "scorer", "variant", "FPR95", "AUROC",
                                                "AUPR"], loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_report(report, out_dir):
    """Write one histogram per split and score kind plus the summary table."""
    if report is None:
        raise DependencyError("no report to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (split, kind), name in histogram_files(report).items():
        hist = report["histograms"][split][kind]
        scorer = report["histograms"][split]["scorer"]
        label = f"{kind} ({scorer})" if kind == "S_h" else kind
        plot_histogram(hist, f"{split}: {label}", out_dir / name)
        written.append(out_dir / name)
    plot_summary_table(report["summary"], out_dir / "summary_table.png")
    written.append(out_dir / "summary_table.png")
    return written
