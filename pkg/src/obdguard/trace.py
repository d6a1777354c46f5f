"""Trip data model and on-disk formats.

A raw trip is two time series recorded by the dongle: vehicle speed read
over OBD-II (km/h, nominally 1 Hz) and the onboard accelerometer (m/s²,
tens of Hz). Both live in one CSV so a trip stays a single inspectable
file; speed-only rows leave the accel columns empty and vice versa.

Aligned records are the per-second regression rows the detector consumes:
y is the speed variation in m/s² over one speed interval, x is the mean
accelerometer vector over the same span.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

KMH_TO_MS = 1000.0 / 3600.0  # exact unit factor, fixed by convention

TRIP_SCHEMA = "trip-v1"
ALIGNED_SCHEMA = "aligned-v1"
_TRIP_HEADER = ["t", "v_kmh", "ax", "ay", "az", "label"]
_ALIGNED_HEADER = ["t", "y", "x1", "x2", "x3", "label"]


class TraceFormatError(ValueError):
    """Raised when a trace file violates its schema. Carries the line number."""

    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class SpeedSample:
    """One OBD speed reading: timestamp (s) and speed in km/h."""

    t: float
    v_kmh: float


@dataclass(frozen=True)
class AccelSample:
    """One accelerometer reading: timestamp (s) and the three axes in m/s².

    Axis convention: ax points along the direction of travel, ay is
    lateral, az is perpendicular to the road plane (gravity shows up here).
    """

    t: float
    ax: float
    ay: float
    az: float


@dataclass(frozen=True)
class RawTrip:
    """A trip: speed series, accel series, optional per-speed-sample labels.

    ``labels`` marks which speed samples were manipulated (ground truth for
    evaluation); ``None`` means untracked. ``scenario`` and ``seed`` record
    provenance when the trip came out of the simulator.
    """

    vin: str
    speed: tuple[SpeedSample, ...]
    accel: tuple[AccelSample, ...]
    labels: tuple[bool, ...] | None = None
    scenario: str = ""
    seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.vin) != 17:
            raise ValueError(f"VIN must be 17 characters, got {len(self.vin)!r}")
        _check_series_times([s.t for s in self.speed], "speed")
        _check_series_times([a.t for a in self.accel], "accel")
        for s in self.speed:
            if not (0.0 <= s.v_kmh <= 255.0):
                raise ValueError(f"speed {s.v_kmh} km/h at t={s.t} outside [0, 255]")
        for a in self.accel:
            if not (np.isfinite(a.ax) and np.isfinite(a.ay) and np.isfinite(a.az)):
                raise ValueError(f"non-finite accel sample at t={a.t}")
        if self.labels is not None and len(self.labels) != len(self.speed):
            raise ValueError(
                f"labels length {len(self.labels)} != speed series length {len(self.speed)}"
            )
        if self.speed and self.accel:
            s0, s1 = self.speed[0].t, self.speed[-1].t
            a0, a1 = self.accel[0].t, self.accel[-1].t
            if s1 < a0 or a1 < s0:
                raise ValueError("speed and accel series do not overlap in time")


def _check_series_times(ts: Sequence[float], name: str) -> None:
    for i, t in enumerate(ts):
        if not np.isfinite(t):
            raise ValueError(f"non-finite {name} timestamp at index {i}")
        if i > 0 and t <= ts[i - 1]:
            raise ValueError(
                f"{name} timestamps not strictly increasing at index {i} "
                f"({ts[i - 1]} -> {t})"
            )


@dataclass(frozen=True)
class AlignedRecord:
    """One regression row: second index t, speed variation y, accel mean x.

    x is (forward, lateral, perpendicular); label carries the manipulation
    truth propagated from the speed sample that closes the interval.
    """

    t: int
    y: float
    x: tuple[float, float, float]
    label: bool = False

    def __post_init__(self) -> None:
        if not np.isfinite(self.y):
            raise ValueError(f"non-finite y at t={self.t}")
        if len(self.x) != 3 or not all(np.isfinite(v) for v in self.x):
            raise ValueError(f"x must be 3 finite values at t={self.t}")


def records_to_arrays(
    records: Sequence[AlignedRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split records into (y, X, labels) numpy arrays; X has shape (n, 3)."""
    y = np.array([r.y for r in records], dtype=float)
    x = np.array([r.x for r in records], dtype=float).reshape(len(records), 3)
    labels = np.array([r.label for r in records], dtype=bool)
    return y, x, labels


# ---------------------------------------------------------------------------
# Trip CSV


def _fmt(v: float) -> str:
    # str() of a float is the shortest exact representation -> lossless
    return str(float(v))


def write_trip(trip: RawTrip, path: str) -> None:
    """Write a trip as CSV with `# key=value` provenance comments up top."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={TRIP_SCHEMA}\n")
        fh.write(f"# vin={trip.vin}\n")
        if trip.scenario:
            fh.write(f"# scenario={trip.scenario}\n")
        if trip.seed is not None:
            fh.write(f"# seed={trip.seed}\n")
        w = csv.writer(fh)
        w.writerow(_TRIP_HEADER)
        rows: list[tuple[float, int, list[str]]] = []
        for i, s in enumerate(trip.speed):
            label = "" if trip.labels is None else str(int(trip.labels[i]))
            rows.append((s.t, 0, [_fmt(s.t), _fmt(s.v_kmh), "", "", "", label]))
        for a in trip.accel:
            rows.append((a.t, 1, [_fmt(a.t), "", _fmt(a.ax), _fmt(a.ay), _fmt(a.az), ""]))
        rows.sort(key=lambda r: (r[0], r[1]))
        for _, _, row in rows:
            w.writerow(row)


def read_trip(path: str) -> RawTrip:
    """Parse a trip CSV (inverse of write_trip)."""
    meta: dict[str, str] = {}
    speed: list[SpeedSample] = []
    accel: list[AccelSample] = []
    labels: list[bool | None] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TraceFormatError(path, 0, f"cannot open: {exc}") from exc
    with fh:
        lineno = 0
        header_seen = False
        reader = csv.reader(fh)
        for row in reader:
            lineno += 1
            if row and row[0].startswith("#"):
                text = ",".join(row)[1:].strip()
                if "=" in text:
                    key, _, value = text.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                if row != _TRIP_HEADER:
                    raise TraceFormatError(
                        path, lineno, f"bad header {row!r}, expected {_TRIP_HEADER!r}"
                    )
                header_seen = True
                continue
            if not row:
                continue
            if len(row) != len(_TRIP_HEADER):
                raise TraceFormatError(path, lineno, f"expected 6 fields, got {len(row)}")
            t_s, v_s, ax_s, ay_s, az_s, label_s = row
            try:
                t = float(t_s)
            except ValueError as exc:
                raise TraceFormatError(path, lineno, f"bad timestamp {t_s!r}") from exc
            has_speed = v_s != ""
            accel_fields = (ax_s, ay_s, az_s)
            has_accel = any(f != "" for f in accel_fields)
            if has_accel and not all(f != "" for f in accel_fields):
                raise TraceFormatError(path, lineno, "accel row must fill ax, ay and az")
            if not has_speed and not has_accel:
                raise TraceFormatError(path, lineno, "row carries neither speed nor accel")
            if has_speed:
                try:
                    v = float(v_s)
                except ValueError as exc:
                    raise TraceFormatError(path, lineno, f"bad speed {v_s!r}") from exc
                speed.append(SpeedSample(t, v))
                if label_s == "":
                    labels.append(None)
                elif label_s in ("0", "1"):
                    labels.append(label_s == "1")
                else:
                    raise TraceFormatError(path, lineno, f"bad label {label_s!r}")
            elif label_s != "":
                raise TraceFormatError(path, lineno, "label on a row without speed")
            if has_accel:
                try:
                    ax, ay, az = (float(f) for f in accel_fields)
                except ValueError as exc:
                    raise TraceFormatError(path, lineno, "bad accel value") from exc
                accel.append(AccelSample(t, ax, ay, az))
        if not header_seen:
            raise TraceFormatError(path, lineno + 1, "missing header row")

    if "schema" in meta and meta["schema"] != TRIP_SCHEMA:
        raise TraceFormatError(path, 1, f"schema {meta['schema']!r} != {TRIP_SCHEMA!r}")
    label_flags = [l for l in labels if l is not None]
    if label_flags and len(label_flags) != len(labels):
        raise TraceFormatError(path, 0, "labels present on some speed rows but not all")
    seed_s = meta.get("seed")
    try:
        return RawTrip(
            vin=meta.get("vin", "0" * 17),
            speed=tuple(speed),
            accel=tuple(accel),
            labels=tuple(bool(l) for l in labels) if label_flags else None,
            scenario=meta.get("scenario", ""),
            seed=int(seed_s) if seed_s is not None else None,
        )
    except ValueError as exc:
        raise TraceFormatError(path, 0, str(exc)) from exc


# ---------------------------------------------------------------------------
# Aligned-record CSV


def write_aligned(records: Iterable[AlignedRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={ALIGNED_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(_ALIGNED_HEADER)
        for r in records:
            w.writerow(
                [str(r.t), _fmt(r.y), _fmt(r.x[0]), _fmt(r.x[1]), _fmt(r.x[2]), str(int(r.label))]
            )


def read_aligned(path: str) -> list[AlignedRecord]:
    records: list[AlignedRecord] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TraceFormatError(path, 0, f"cannot open: {exc}") from exc
    with fh:
        lineno = 0
        header_seen = False
        for row in csv.reader(fh):
            lineno += 1
            if row and row[0].startswith("#"):
                text = ",".join(row)[1:].strip()
                key, _, value = text.partition("=")
                if key.strip() == "schema" and value.strip() != ALIGNED_SCHEMA:
                    raise TraceFormatError(
                        path, lineno, f"schema {value.strip()!r} != {ALIGNED_SCHEMA!r}"
                    )
                continue
            if not header_seen:
                if row != _ALIGNED_HEADER:
                    raise TraceFormatError(
                        path, lineno, f"bad header {row!r}, expected {_ALIGNED_HEADER!r}"
                    )
                header_seen = True
                continue
            if not row:
                continue
            if len(row) != len(_ALIGNED_HEADER):
                raise TraceFormatError(path, lineno, f"expected 6 fields, got {len(row)}")
            try:
                records.append(
                    AlignedRecord(
                        t=int(row[0]),
                        y=float(row[1]),
                        x=(float(row[2]), float(row[3]), float(row[4])),
                        label=bool(int(row[5])),
                    )
                )
            except ValueError as exc:
                raise TraceFormatError(path, lineno, str(exc)) from exc
        if not header_seen:
            raise TraceFormatError(path, lineno + 1, "missing header row")
    return records
