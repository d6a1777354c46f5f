"""Turn a raw trip into per-second regression records.

Three steps:

1. speed variation: first difference of the reported speed, converted to
   m/s² by the km/h factor and the actual time gap, tagged with the
   interval it covers;
2. accel windows: per-axis means of the accelerometer over fixed windows
   [k*w, (k+1)*w); a window with too few samples is marked missing;
3. alignment: every speed interval is paired with the overlap-weighted
   mean of the accel windows it spans. Intervals touching a missing
   window are dropped (reported, not silently).

Manipulation labels ride along from the speed sample that closes each
interval, because that is the reading the variation exposes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import KMH_TO_MS, AccelSample, AlignedRecord, RawTrip, SpeedSample


@dataclass(frozen=True)
class PreprocessConfig:
    window_s: float = 1.0
    min_samples_per_window: int = 1
    # unit factor applied to speed differences; km/h -> m/s by convention
    speed_unit_factor: float = KMH_TO_MS

    def __post_init__(self) -> None:
        if self.window_s <= 0:
            raise ValueError(f"window_s must be positive, got {self.window_s}")
        if self.min_samples_per_window < 1:
            raise ValueError("min_samples_per_window must be >= 1")


@dataclass(frozen=True)
class SpeedVariation:
    """Speed change over one interval (t_start, t_end], as a rate in m/s²."""

    t_start: float
    t_end: float
    y: float


@dataclass(frozen=True)
class AccelWindow:
    """Mean accel vector over window [index*w, (index+1)*w).

    ``x`` is None when the window had fewer than the configured minimum
    number of samples; ``n_samples`` keeps the raw count either way.
    """

    index: int
    x: tuple[float, float, float] | None
    n_samples: int


def derive_speed_variation(
    speed: Sequence[SpeedSample], cfg: PreprocessConfig
) -> list[SpeedVariation]:
    """First-difference the speed series into rates; length is len(speed)-1.

    Raises on a zero or negative time gap; returns [] for fewer than two
    samples.
    """
    out: list[SpeedVariation] = []
    for prev, cur in zip(speed, speed[1:]):
        dt = cur.t - prev.t
        if dt <= 0:
            raise ValueError(f"non-increasing speed timestamps at t={cur.t}")
        y = (cur.v_kmh - prev.v_kmh) * cfg.speed_unit_factor / dt
        out.append(SpeedVariation(prev.t, cur.t, y))
    return out


def average_accel_windows(
    accel: Sequence[AccelSample], cfg: PreprocessConfig
) -> list[AccelWindow]:
    """Bucket accel samples into windows [k*w, (k+1)*w) and average per axis.

    Covers every window index from the first to the last sample; indices in
    between with too few samples come back marked missing.
    """
    if not accel:
        return []
    w = cfg.window_s
    first = math.floor(accel[0].t / w)
    last = math.floor(accel[-1].t / w)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for a in accel:
        k = math.floor(a.t / w)
        if k not in sums:
            sums[k] = np.zeros(3)
            counts[k] = 0
        sums[k] += (a.ax, a.ay, a.az)
        counts[k] += 1
    out: list[AccelWindow] = []
    for k in range(first, last + 1):
        n = counts.get(k, 0)
        if n >= cfg.min_samples_per_window:
            m = sums[k] / n
            out.append(AccelWindow(k, (float(m[0]), float(m[1]), float(m[2])), n))
        else:
            out.append(AccelWindow(k, None, n))
    return out


def align_records(
    variations: Sequence[SpeedVariation],
    windows: Sequence[AccelWindow],
    cfg: PreprocessConfig,
    labels: Sequence[bool] | None = None,
) -> tuple[list[AlignedRecord], int]:
    """Pair each speed variation with its overlap-weighted accel mean.

    ``labels``, when given, runs parallel to ``variations``. A variation
    whose span touches any missing window (or reaches outside the window
    range) is dropped; the second return value counts the drops.
    """
    if labels is not None and len(labels) != len(variations):
        raise ValueError("labels must run parallel to variations")
    by_index = {win.index: win for win in windows}
    w = cfg.window_s
    records: list[AlignedRecord] = []
    n_dropped = 0
    for i, var in enumerate(variations):
        k_first = math.floor(var.t_start / w)
        k_last = math.floor(var.t_end / w)
        weighted = np.zeros(3)
        total = 0.0
        usable = True
        for k in range(k_first, k_last + 1):
            lo = max(var.t_start, k * w)
            hi = min(var.t_end, (k + 1) * w)
            overlap = hi - lo
            if overlap <= 0:
                continue
            win = by_index.get(k)
            if win is None or win.x is None:
                usable = False
                break
            weighted += overlap * np.asarray(win.x)
            total += overlap
        if not usable or total <= 0:
            n_dropped += 1
            continue
        x = weighted / total
        records.append(
            AlignedRecord(
                t=int(round(var.t_end)),
                y=var.y,
                x=(float(x[0]), float(x[1]), float(x[2])),
                label=bool(labels[i]) if labels is not None else False,
            )
        )
    return records, n_dropped


def preprocess_trip(
    trip: RawTrip, cfg: PreprocessConfig | None = None
) -> tuple[list[AlignedRecord], int]:
    """Full preprocessing for one trip; returns (records, n_dropped).

    Labels for a variation come from the *later* speed sample of its pair —
    the manipulated reading is the one that closes the interval.
    """
    cfg = cfg or PreprocessConfig()
    variations = derive_speed_variation(trip.speed, cfg)
    windows = average_accel_windows(trip.accel, cfg)
    labels = None
    if trip.labels is not None:
        labels = [trip.labels[i + 1] for i in range(len(variations))]
    return align_records(variations, windows, cfg, labels)
