"""Scenario-driven vehicle simulator.

A scenario is a list of driving segments (accelerate / cruise / brake /
stop). Speed follows the commanded rate exactly between integer clamps, so
the simulator solves each segment in closed form (piecewise-linear speed,
piecewise-constant acceleration) instead of numerically integrating; the
sampled series are then exact up to float arithmetic, which is what the
physics-identity tests lean on.

The OBD side reports speed quantized to whole km/h (one-byte PID), the
accelerometer side reports forward/lateral/vertical acceleration with
road noise, engine vibration, occasional lateral turn pulses, and gravity
on the vertical axis. Everything is deterministic in the scenario seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .trace import AccelSample, RawTrip, SpeedSample

SEGMENT_KINDS = ("accelerate", "cruise", "brake", "stop")
MS2_TO_KMH_PER_S = 3.6
MAX_PLAUSIBLE_RATE_MS2 = 12.0
ENGINE_ON_VOLTAGE = 13.3
ENGINE_OFF_VOLTAGE = 12.0
IDLE_RPM = 800.0
RPM_PER_KMH = 40.0
ENGINE_VIBRATION_HZ = 27.0
_VIB_PHASES = (0.0, 2.0943951023931953, 4.1887902047863905)  # 2*pi/3 apart


@dataclass(frozen=True)
class NoiseConfig:
    road_sigma: float = 0.3          # white noise per accel sample, m/s^2
    vibration_amp: float = 0.1       # engine-vibration sinusoid amplitude
    lateral_event_rate: float = 1.0  # turn pulses per minute
    gravity_z: float = 9.81

    def __post_init__(self) -> None:
        for name in ("road_sigma", "vibration_amp", "lateral_event_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Segment:
    kind: str
    target_speed_kmh: float = 0.0
    rate_ms2: float = 0.0
    duration_s: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.duration_s <= 0:
            raise ValueError("segment duration must be positive")
        if not (0.0 <= self.target_speed_kmh <= 255.0):
            raise ValueError("target speed outside [0, 255] km/h")
        if not (0.0 <= self.rate_ms2 <= MAX_PLAUSIBLE_RATE_MS2):
            raise ValueError(f"rate outside [0, {MAX_PLAUSIBLE_RATE_MS2}] m/s^2")
        if self.kind in ("accelerate", "brake") and self.rate_ms2 == 0:
            raise ValueError(f"{self.kind} segment needs a positive rate")


@dataclass(frozen=True)
class Scenario:
    segments: tuple[Segment, ...]
    noise: NoiseConfig = NoiseConfig()
    seed: int = 0
    accel_rate_hz: float = 16.7
    obd_rate_hz: float = 1.0
    vin: str = "SIMVEH0000TEST001"
    quantize_speed: bool = True  # one-byte OBD PID -> whole km/h

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("scenario needs at least one segment")
        if self.accel_rate_hz <= 0 or self.obd_rate_hz <= 0:
            raise ValueError("sampling rates must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if len(self.vin) != 17:
            raise ValueError("VIN must be 17 characters")

    @property
    def duration_s(self) -> float:
        return sum(s.duration_s for s in self.segments)


@dataclass(frozen=True)
class VehicleState:
    """Snapshot of what the diagnostic bus would report at time t."""

    t: float
    speed_kmh: float
    rpm: float
    maf_gps: float
    voltage: float
    vin: str = "SIMVEH0000TEST001"
    dtc_codes: tuple[str, ...] = ()


def engine_outputs(speed_kmh: float, engine_on: bool) -> tuple[float, float, float]:
    """(rpm, maf, voltage) from speed and engine flag; maf > 0 iff rpm > 0."""
    if not engine_on:
        return 0.0, 0.0, ENGINE_OFF_VOLTAGE
    rpm = IDLE_RPM + RPM_PER_KMH * speed_kmh
    maf = 2.0 + 0.003 * rpm
    return rpm, maf, ENGINE_ON_VOLTAGE


def step_vehicle(state: VehicleState, segment: Segment, dt: float) -> VehicleState:
    """Advance one state by dt seconds under a segment's command.

    accelerate/brake move the speed toward the target at the commanded
    rate and hold once reached; cruise holds speed; stop cuts the engine
    (and brakes toward zero if the segment carries a rate). Speed is
    clamped to the representable [0, 255] km/h.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = state.speed_kmh
    if segment.kind in ("accelerate", "brake"):
        step = segment.rate_ms2 * MS2_TO_KMH_PER_S * dt
        if segment.target_speed_kmh >= v:
            v = min(segment.target_speed_kmh, v + step)
        else:
            v = max(segment.target_speed_kmh, v - step)
    elif segment.kind == "stop" and segment.rate_ms2 > 0:
        v = max(0.0, v - segment.rate_ms2 * MS2_TO_KMH_PER_S * dt)
    v = min(255.0, max(0.0, v))
    engine_on = segment.kind != "stop"
    rpm, maf, voltage = engine_outputs(v, engine_on)
    return VehicleState(state.t + dt, v, rpm, maf, voltage, state.vin, state.dtc_codes)


# ---------------------------------------------------------------------------
# Closed-form speed profile


@dataclass(frozen=True)
class _Piece:
    t0: float
    t1: float
    v0_kmh: float
    slope_kmh_per_s: float
    accel_ms2: float
    engine_on: bool


def _build_profile(scenario: Scenario) -> list[_Piece]:
    pieces: list[_Piece] = []
    t = 0.0
    v = 0.0
    for seg in scenario.segments:
        engine_on = seg.kind != "stop"
        if seg.kind == "cruise":
            pieces.append(_Piece(t, t + seg.duration_s, v, 0.0, 0.0, engine_on))
        else:
            if seg.kind == "stop":
                target = 0.0 if seg.rate_ms2 > 0 else v
            else:
                target = seg.target_speed_kmh
            direction = 0.0 if target == v else math.copysign(1.0, target - v)
            slope = direction * seg.rate_ms2 * MS2_TO_KMH_PER_S
            t_hit = seg.duration_s if slope == 0 else min(
                seg.duration_s, abs(target - v) / abs(slope)
            )
            if t_hit > 0:
                pieces.append(
                    _Piece(t, t + t_hit, v, slope, direction * seg.rate_ms2, engine_on)
                )
                v = v + slope * t_hit
            if t_hit < seg.duration_s:
                pieces.append(
                    _Piece(t + t_hit, t + seg.duration_s, v, 0.0, 0.0, engine_on)
                )
        t += seg.duration_s
    return pieces


def _locate(pieces: list[_Piece], times: np.ndarray) -> np.ndarray:
    starts = np.array([p.t0 for p in pieces])
    idx = np.searchsorted(starts, times, side="right") - 1
    return np.clip(idx, 0, len(pieces) - 1)


def _speed_at(pieces: list[_Piece], times: np.ndarray) -> np.ndarray:
    idx = _locate(pieces, times)
    v0 = np.array([p.v0_kmh for p in pieces])[idx]
    slope = np.array([p.slope_kmh_per_s for p in pieces])[idx]
    t0 = np.array([p.t0 for p in pieces])[idx]
    # np.minimum guards the final sample landing exactly on the profile end
    t1 = np.array([p.t1 for p in pieces])[idx]
    return np.clip(v0 + slope * (np.minimum(times, t1) - t0), 0.0, 255.0)


def _accel_at(pieces: list[_Piece], times: np.ndarray) -> np.ndarray:
    idx = _locate(pieces, times)
    return np.array([p.accel_ms2 for p in pieces])[idx]


def _engine_on_at(pieces: list[_Piece], times: np.ndarray) -> np.ndarray:
    idx = _locate(pieces, times)
    return np.array([p.engine_on for p in pieces])[idx]


def generate_trip(scenario: Scenario, seed: int | None = None) -> RawTrip:
    """Sample the closed-form profile into a RawTrip.

    Speed is sampled at obd_rate_hz (quantized to whole km/h unless the
    scenario turns that off), acceleration at accel_rate_hz with noise:
    white road noise on all axes, an engine-vibration sinusoid while the
    engine runs, Gaussian turn pulses on the lateral axis, gravity on the
    vertical axis. Labels are all-False: the simulator only produces
    honest trips. Deterministic in the seed (scenario.seed unless
    overridden).
    """
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    pieces = _build_profile(scenario)
    total = scenario.duration_s

    t_speed = np.arange(math.floor(total * scenario.obd_rate_hz + 1e-9) + 1) / scenario.obd_rate_hz
    v = _speed_at(pieces, t_speed)
    if scenario.quantize_speed:
        v = np.rint(v)

    t_acc = np.arange(math.floor(total * scenario.accel_rate_hz + 1e-9) + 1) / scenario.accel_rate_hz
    forward = _accel_at(pieces, t_acc)
    engine_on = _engine_on_at(pieces, t_acc)

    noise = scenario.noise
    # RNG draw order is fixed: pulse geometry first, then per-axis noise.
    n_pulses = rng.poisson(noise.lateral_event_rate * total / 60.0)
    centers = rng.uniform(0.0, total, size=n_pulses)
    widths = rng.uniform(0.5, 1.5, size=n_pulses)
    amps = rng.uniform(0.5, 2.0, size=n_pulses) * rng.choice((-1.0, 1.0), size=n_pulses)
    lateral = np.zeros_like(t_acc)
    moving = _speed_at(pieces, centers) > 1.0  # no turn pulses while parked
    for c, wdt, amp, ok in zip(centers, widths, amps, moving):
        if ok:
            lateral += amp * np.exp(-0.5 * ((t_acc - c) / wdt) ** 2)

    vib = [
        noise.vibration_amp * np.sin(2 * np.pi * ENGINE_VIBRATION_HZ * t_acc + ph) * engine_on
        for ph in _VIB_PHASES
    ]
    ax = forward + vib[0] + rng.normal(0.0, noise.road_sigma, t_acc.size)
    ay = lateral + vib[1] + rng.normal(0.0, noise.road_sigma, t_acc.size)
    az = noise.gravity_z + vib[2] + rng.normal(0.0, noise.road_sigma, t_acc.size)

    return RawTrip(
        vin=scenario.vin,
        speed=tuple(SpeedSample(float(t), float(s)) for t, s in zip(t_speed, v)),
        accel=tuple(
            AccelSample(float(t), float(a1), float(a2), float(a3))
            for t, a1, a2, a3 in zip(t_acc, ax, ay, az)
        ),
        labels=tuple(False for _ in t_speed),
        scenario=scenario_name(scenario),
        seed=scenario.seed if seed is None else seed,
    )


def vehicle_states(scenario: Scenario, rate_hz: float | None = None) -> list[VehicleState]:
    """Noise-free bus snapshots at the OBD cadence (for driving a device)."""
    rate = rate_hz or scenario.obd_rate_hz
    pieces = _build_profile(scenario)
    times = np.arange(math.floor(scenario.duration_s * rate + 1e-9) + 1) / rate
    speeds = _speed_at(pieces, times)
    engine = _engine_on_at(pieces, times)
    out = []
    for t, v, on in zip(times, speeds, engine):
        rpm, maf, voltage = engine_outputs(float(v), bool(on))
        out.append(VehicleState(float(t), float(v), rpm, maf, voltage, scenario.vin))
    return out


def scenario_name(scenario: Scenario) -> str:
    kinds = "-".join(s.kind[0] for s in scenario.segments)
    return f"sim[{kinds}]"


# ---------------------------------------------------------------------------
# Scenario JSON


def scenario_to_dict(scenario: Scenario) -> dict:
    d = asdict(scenario)
    d["segments"] = [asdict(s) for s in scenario.segments]
    return d


def scenario_from_dict(data: dict) -> Scenario:
    try:
        segments = tuple(Segment(**s) for s in data["segments"])
        noise = NoiseConfig(**data.get("noise", {}))
        extra = {
            k: data[k]
            for k in ("seed", "accel_rate_hz", "obd_rate_hz", "vin", "quantize_speed")
            if k in data
        }
        return Scenario(segments=segments, noise=noise, **extra)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad scenario structure: {exc}") from exc


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")
