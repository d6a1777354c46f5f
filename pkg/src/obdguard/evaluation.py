"""Detection quality metrics: confusion ratios, ROC sweep, event grouping.

Positives are manipulated records. Undefined ratios (no positives, or no
negatives) come back as None rather than a silent 0 — a corpus of only
clean trips has no false-negative rate.

The ROC sweeps the per-record score (lower = more anomalous), treating
tied scores atomically. Each swept cutoff s is also expressed as the
credible level that would flag exactly the records with score <= s
(level = 1 - 2s, clipped to [0, 1]); that column is a plotting aid, the
fpr/tpr pairs are the contract.

Events group nearby records (gap <= gap_s seconds) so that one flattened
braking maneuver counts once however many seconds it smears across.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detect import DetectionReport
from .trace import AlignedRecord


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def fpr(self) -> float | None:
        return self.fp / (self.fp + self.tn) if (self.fp + self.tn) else None

    @property
    def fnr(self) -> float | None:
        return self.fn / (self.fn + self.tp) if (self.fn + self.tp) else None

    @property
    def tpr(self) -> float | None:
        fnr = self.fnr
        return None if fnr is None else 1.0 - fnr


def confusion(flags: Sequence[bool], labels: Sequence[bool]) -> Confusion:
    if len(flags) != len(labels):
        raise ValueError("flags and labels must have equal length")
    f = np.asarray(flags, dtype=bool)
    l = np.asarray(labels, dtype=bool)
    return Confusion(
        tp=int(np.sum(f & l)),
        fp=int(np.sum(f & ~l)),
        tn=int(np.sum(~f & ~l)),
        fn=int(np.sum(~f & l)),
    )


@dataclass(frozen=True)
class RocPoint:
    level: float
    fpr: float
    tpr: float


def roc_from_scores(
    scores: Sequence[float], labels: Sequence[bool]
) -> tuple[list[RocPoint], float | None]:
    """ROC points and trapezoid AUC; (points=[], auc=None) when only one
    class is present."""
    s = np.asarray(scores, dtype=float)
    l = np.asarray(labels, dtype=bool)
    if s.size != l.size:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(l.sum())
    n_neg = int(s.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return [], None
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    l_sorted = l[order]
    points = [RocPoint(1.0, 0.0, 0.0)]  # nothing flagged
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(l_sorted[i:j].sum())
        fp += (j - i) - int(l_sorted[i:j].sum())
        level = float(min(1.0, max(0.0, 1.0 - 2.0 * s_sorted[i])))
        points.append(RocPoint(level, fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for a, b in zip(points, points[1:]):
        auc += 0.5 * (a.tpr + b.tpr) * (b.fpr - a.fpr)
    return points, float(auc)


@dataclass(frozen=True)
class EventGroup:
    start_t: float
    end_t: float
    indices: tuple[int, ...]
    truth: bool      # any member carries a manipulation label
    detected: bool   # any member was flagged


def group_events(
    times: Sequence[float],
    flags: Sequence[bool],
    labels: Sequence[bool],
    gap_s: float = 2.0,
) -> list[EventGroup]:
    """Merge flagged-or-labeled records within gap_s seconds into events."""
    if not (len(times) == len(flags) == len(labels)):
        raise ValueError("times, flags and labels must have equal length")
    if gap_s < 0:
        raise ValueError("gap_s must be >= 0")
    marked = [
        (float(times[i]), i) for i in range(len(times)) if flags[i] or labels[i]
    ]
    marked.sort()
    groups: list[EventGroup] = []
    cur: list[tuple[float, int]] = []
    for t, i in marked:
        if cur and t - cur[-1][0] > gap_s:
            groups.append(_close_group(cur, flags, labels))
            cur = []
        cur.append((t, i))
    if cur:
        groups.append(_close_group(cur, flags, labels))
    return groups


def _close_group(
    members: list[tuple[float, int]], flags: Sequence[bool], labels: Sequence[bool]
) -> EventGroup:
    idx = tuple(i for _, i in members)
    return EventGroup(
        start_t=members[0][0],
        end_t=members[-1][0],
        indices=idx,
        truth=any(labels[i] for i in idx),
        detected=any(flags[i] for i in idx),
    )


@dataclass(frozen=True)
class EventMetrics:
    n_truth: int
    n_truth_detected: int
    n_false_alarm: int

    @property
    def event_fnr(self) -> float | None:
        if self.n_truth == 0:
            return None
        return (self.n_truth - self.n_truth_detected) / self.n_truth


def event_metrics(groups: Sequence[EventGroup]) -> EventMetrics:
    truth = [g for g in groups if g.truth]
    return EventMetrics(
        n_truth=len(truth),
        n_truth_detected=sum(1 for g in truth if g.detected),
        n_false_alarm=sum(1 for g in groups if g.detected and not g.truth),
    )


def combine_event_metrics(parts: Sequence[EventMetrics]) -> EventMetrics:
    """Sum event counts computed separately, e.g. one EventMetrics per trip.

    Timestamps restart at zero for every trip, so grouping a pooled
    multi-trip stream by time would merge events from different trips.
    """
    return EventMetrics(
        n_truth=sum(p.n_truth for p in parts),
        n_truth_detected=sum(p.n_truth_detected for p in parts),
        n_false_alarm=sum(p.n_false_alarm for p in parts),
    )


@dataclass(frozen=True)
class Metrics:
    level: float
    point: Confusion
    roc: tuple[RocPoint, ...]
    auc: float | None
    events: EventMetrics
    n_records: int
    n_flagged: int


def evaluate_detection(
    report: DetectionReport,
    records: Sequence[AlignedRecord],
    gap_s: float = 2.0,
) -> Metrics:
    """Score a report against the records it was produced from."""
    if len(report.records) != len(records):
        raise ValueError("report and records differ in length")
    for v, r in zip(report.records, records):
        if v.t != r.t:
            raise ValueError(f"report/record mismatch at t={v.t} vs {r.t}")
    flags = report.flags()
    labels = [r.label for r in records]
    times = [float(r.t) for r in records]
    roc, auc = roc_from_scores(report.scores(), labels)
    return Metrics(
        level=report.level,
        point=confusion(flags, labels),
        roc=tuple(roc),
        auc=auc,
        events=event_metrics(group_events(times, flags, labels, gap_s)),
        n_records=len(records),
        n_flagged=int(flags.sum()),
    )


# ---------------------------------------------------------------------------
# Persistence: metrics as one JSON document, ROC as level,fpr,tpr CSV.


def write_metrics(metrics: Metrics, path: str) -> None:
    obj = {
        "level": metrics.level,
        "n_records": metrics.n_records,
        "n_flagged": metrics.n_flagged,
        "counts": {
            "tp": metrics.point.tp,
            "fp": metrics.point.fp,
            "tn": metrics.point.tn,
            "fn": metrics.point.fn,
        },
        "fpr": metrics.point.fpr,
        "fnr": metrics.point.fnr,
        "tpr": metrics.point.tpr,
        "auc": metrics.auc,
        "events": {
            "n_truth": metrics.events.n_truth,
            "n_truth_detected": metrics.events.n_truth_detected,
            "n_false_alarm": metrics.events.n_false_alarm,
            "event_fnr": metrics.events.event_fnr,
        },
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_roc_csv(points: Sequence[RocPoint], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "fpr", "tpr"])
        for p in points:
            w.writerow([str(float(p.level)), str(float(p.fpr)), str(float(p.tpr))])


def read_roc_csv(path: str) -> list[RocPoint]:
    points: list[RocPoint] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["level", "fpr", "tpr"]:
            raise ValueError(f"{path}: bad ROC header {header!r}")
        for row in reader:
            if not row:
                continue
            points.append(RocPoint(float(row[0]), float(row[1]), float(row[2])))
    return points
