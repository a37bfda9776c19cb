"""Matplotlib renderings of evaluation reports, written next to the CSVs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import EvalReport, SweepPoint


def report_figure(reports: list[EvalReport], path) -> Path:
    """Fractional success vs. object count, one errorbar line per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for report in reports:
        agg = [r for r in report.rows if r.seed == "all"]
        if not agg:
            continue
        agg.sort(key=lambda r: r.k)
        label = f"{agg[0].method} ({agg[0].setting})"
        ax.errorbar(
            [r.k for r in agg],
            [r.mean_fsr for r in agg],
            yerr=[r.stderr or 0.0 for r in agg],
            marker="o",
            capsize=3,
            label=label,
        )
    ax.set_xlabel("object count")
    ax.set_ylabel("fractional success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def sweep_figure(points: list[SweepPoint], path) -> Path:
    """Fractional success vs. the swept value, one line per object count."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    by_k: dict[int, list[tuple[float, float, float]]] = {}
    for point in points:
        for row in point.report.rows:
            if row.seed != "all":
                continue
            by_k.setdefault(row.k, []).append((point.value, row.mean_fsr, row.stderr or 0.0))
    for k in sorted(by_k):
        series = sorted(by_k[k])
        ax.errorbar(
            [v for v, _, _ in series],
            [m for _, m, _ in series],
            yerr=[e for _, _, e in series],
            marker="o",
            capsize=3,
            label=f"k={k}",
        )
    if points:
        ax.set_xlabel(points[0].axis)
    ax.set_ylabel("fractional success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
