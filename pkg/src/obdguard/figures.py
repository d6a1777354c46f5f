"""Report figures. Strictly a presentation layer over already-computed
results: nothing in here feeds back into detection or metrics, and no
other module imports it, so the numeric paths stay matplotlib-free."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .detect import DetectionReport
from .evaluation import RocPoint


def plot_roc(points: Sequence[RocPoint], path: str, auc: float | None = None) -> None:
    """ROC curve PNG; diagonal shown for reference."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], ls=":", lw=1, color="0.6")
    if points:
        ax.plot([p.fpr for p in points], [p.tpr for p in points], marker=".", ms=4)
    label = "ROC" if auc is None else f"ROC (AUC = {auc:.3f})"
    ax.set_title(label)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_detection_timeline(report: DetectionReport, path: str) -> None:
    """Observed speed variation vs. the predictive band, flags highlighted."""
    t = [r.t for r in report.records]
    y = [r.y for r in report.records]
    lo = [r.range.lo for r in report.records]
    hi = [r.range.hi for r in report.records]
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.fill_between(t, lo, hi, alpha=0.25, lw=0, label=f"{report.level:.0%} predictive band")
    ax.plot(t, y, lw=0.8, color="k", label="speed variation")
    ft = [r.t for r in report.records if r.flagged]
    fy = [r.y for r in report.records if r.flagged]
    if ft:
        ax.plot(ft, fy, "rx", ms=6, label="flagged")
    ax.set_xlabel("trip time (s)")
    ax.set_ylabel("m/s²")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
