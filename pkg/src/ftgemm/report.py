"""Render campaign reports to delimited tables and figures.

The JSON report produced by a campaign is the source of truth; this
module derives the human-facing views from it: a summary CSV in the
shape of a classic outcome table, a per-category CSV, and two PNG
charts.  Rendering is pulled out of the campaign path so that headless
batch runs never import matplotlib.
"""

from __future__ import annotations

import csv
import os

from .faults import OUTCOME_CLASSES, CampaignReport

__all__ = ["write_summary_csv", "write_categories_csv", "render_figures", "write_report_bundle"]


def write_summary_csv(report: CampaignReport, path: str) -> None:
    d = report.data
    n = d["plan"]["n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outcome", "count", "percent", "upper_bound_95_percent"])
        for name in OUTCOME_CLASSES:
            bound = d["poisson_bounds"].get(name)
            w.writerow(
                [
                    name,
                    d["outcomes"][name],
                    f"{d['outcomes_percent'][name]:.4f}",
                    bound["display"] if bound else "",
                ]
            )
        w.writerow(["total", n, "100.0000", ""])


def write_categories_csv(report: CampaignReport, path: str) -> None:
    d = report.data
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "injections", *OUTCOME_CLASSES])
        for cat, sub in d["per_category"].items():
            total = sum(sub.values())
            w.writerow([cat, total, *(sub[name] for name in OUTCOME_CLASSES)])


def render_figures(report: CampaignReport, out_dir: str) -> list:
    """Write outcome and per-category charts, return the file paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = report.data
    paths = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    counts = [d["outcomes"][name] for name in OUTCOME_CLASSES]
    bars = ax.bar(range(len(OUTCOME_CLASSES)), counts, color="#4878a8")
    ax.set_xticks(range(len(OUTCOME_CLASSES)))
    ax.set_xticklabels(OUTCOME_CLASSES, rotation=15, ha="right")
    ax.set_ylabel("experiments")
    ax.set_title(
        f"Injection outcomes ({d['plan']['variant']}, {d['plan']['mode']}, "
        f"n={d['plan']['n']})"
    )
    for bar, count in zip(bars, counts):
        ax.annotate(
            str(count),
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center",
            va="bottom",
            fontsize=9,
        )
    fig.tight_layout()
    p = os.path.join(out_dir, "outcomes.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    cats = list(d["per_category"])
    fig, ax = plt.subplots(figsize=(9, 5))
    bottoms = [0.0] * len(cats)
    colors = {
        "correct_no_retry": "#6aa84f",
        "correct_with_retry": "#3d85c6",
        "incorrect": "#cc0000",
        "timeout": "#e69138",
    }
    for name in OUTCOME_CLASSES:
        totals = [sum(d["per_category"][c].values()) or 1 for c in cats]
        vals = [
            d["per_category"][c][name] * 100.0 / t for c, t in zip(cats, totals)
        ]
        ax.bar(range(len(cats)), vals, bottom=bottoms, label=name, color=colors[name])
        bottoms = [b + v for b, v in zip(bottoms, vals)]
    ax.set_xticks(range(len(cats)))
    ax.set_xticklabels(cats, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("share of category injections [%]")
    ax.set_title("Outcome mix per injection site category")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = os.path.join(out_dir, "categories.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def write_report_bundle(report: CampaignReport, out_dir: str, figures: bool = True) -> list:
    """Emit every derived view of one report into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    p = os.path.join(out_dir, "summary.csv")
    write_summary_csv(report, p)
    paths.append(p)
    p = os.path.join(out_dir, "categories.csv")
    write_categories_csv(report, p)
    paths.append(p)
    if figures:
        paths.extend(render_figures(report, out_dir))
    return paths
