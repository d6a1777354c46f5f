"""Speed-channel manipulation: offline replay and in-transit flattening.

Both attacks only touch the OBD speed stream — the accelerometer sits
inside the dongle where a plug-in adversary cannot reach it, which is the
asymmetry the detector exploits. Each attack returns the manipulated trip
*with per-sample ground-truth labels* (True where the reported value
differs from the honest one) so detection quality can be scored later.

Flattening targets the hard-brake beep: whenever the honest reading would
drop by at least the device's threshold relative to the last reported
value, the attacker reports the highest value whose drop stays under the
threshold, then walks back down toward the honest speed on subsequent
ticks. Replay substitutes a previously recorded speed stream on the live
clock, looping the recording when the live trip is longer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .trace import RawTrip, SpeedSample


@dataclass(frozen=True)
class FlattenConfig:
    # threshold the attacker assumes the dongle beeps at, whole km/h per tick
    threshold_kmh_per_s: int = 11

    def __post_init__(self) -> None:
        if self.threshold_kmh_per_s < 1:
            raise ValueError("threshold must be >= 1 km/h per tick")


@dataclass(frozen=True)
class ReplayConfig:
    recorded: RawTrip

    def __post_init__(self) -> None:
        if not self.recorded.speed:
            raise ValueError("replay needs a non-empty recorded speed stream")
        if self.recorded.labels is not None and any(self.recorded.labels):
            raise ValueError("replay source must be an honest recording")


def flatten_speeds(
    speeds: Sequence[int], cfg: FlattenConfig
) -> tuple[list[int], list[bool]]:
    """Flatten one integer speed stream; returns (output, labels).

    Tracks prev = the last value actually reported (initialized to the
    first honest value). If prev - v >= threshold the attacker reports
    prev - (threshold - 1); otherwise it passes v through. A label is True
    exactly where output != honest input.
    """
    out: list[int] = []
    labels: list[bool] = []
    prev: int | None = None
    for v in speeds:
        v = int(v)
        if prev is None:
            prev = v
        if prev - v >= cfg.threshold_kmh_per_s:
            reported = prev - (cfg.threshold_kmh_per_s - 1)
        else:
            reported = v
        out.append(reported)
        labels.append(reported != v)
        prev = reported
    return out, labels


def flatten_attack(trip: RawTrip, cfg: FlattenConfig | None = None) -> RawTrip:
    """Apply flattening to a trip's speed series (accel untouched)."""
    cfg = cfg or FlattenConfig()
    values, labels = flatten_speeds([int(round(s.v_kmh)) for s in trip.speed], cfg)
    base = trip.labels or tuple(False for _ in trip.speed)
    return RawTrip(
        vin=trip.vin,
        speed=tuple(
            SpeedSample(s.t, float(v)) for s, v in zip(trip.speed, values)
        ),
        accel=trip.accel,
        labels=tuple(a or b for a, b in zip(base, labels)),
        scenario=trip.scenario,
        seed=trip.seed,
    )


def replay_attack(live: RawTrip, cfg: ReplayConfig) -> RawTrip:
    """Replace the live speed stream with a recording on the live clock.

    Value i comes from recording index i mod len(recording); the live
    accel series is untouched (the dongle keeps measuring the real,
    possibly stationary, vehicle). Labels mark samples where the replayed
    value differs from the honest one.
    """
    recorded = [s.v_kmh for s in cfg.recorded.speed]
    n_rec = len(recorded)
    base = live.labels or tuple(False for _ in live.speed)
    speed = []
    labels = []
    for i, s in enumerate(live.speed):
        v = recorded[i % n_rec]
        speed.append(SpeedSample(s.t, v))
        labels.append(base[i] or (v != s.v_kmh))
    return RawTrip(
        vin=live.vin,
        speed=tuple(speed),
        accel=live.accel,
        labels=tuple(labels),
        scenario=live.scenario,
        seed=live.seed,
    )
