"""OBD-II request/response codec and the dongle's trip state machine.

The codec covers the handful of PIDs the dongle actually uses: vehicle
speed (mode 01 PID 0D, one byte, whole km/h), engine RPM (mode 01 PID 0C,
two bytes, quarter-RPM resolution), MAF air flow (mode 01 PID 10, two
bytes, 0.01 g/s), stored trouble codes (mode 03) and the VIN (mode 09
PID 02). Anything else gets the standard negative response (0x7F).

The device logic mirrors how these dongles segment trips in the field:
supply voltage at or above 13.3 V means the alternator is charging, so
ignition is on; engine RPM above zero confirms a trip; a voltage drop
alone is *not* trip end (stop-start cars dip at lights) — the trip closes
only once RPM and MAF both read zero while the voltage is low. While in a
trip the device polls speed once per tick and beeps when consecutive
readings drop by the hard-brake threshold (11 km/h per second ≈ 7 mph/s).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union

from .trace import RawTrip, SpeedSample
from .vehicle import ENGINE_ON_VOLTAGE, VehicleState, engine_outputs

MODE_CURRENT = 0x01
MODE_DTC = 0x03
MODE_INFO = 0x09
PID_VIN = 0x02
PID_RPM = 0x0C
PID_SPEED = 0x0D
PID_MAF = 0x10
NEGATIVE_RESPONSE_MODE = 0x7F
_NRC_NOT_SUPPORTED = 0x12

_DTC_CODE_LEN = 5  # e.g. "P0133"


@dataclass(frozen=True)
class ObdRequest:
    mode: int
    pid: int = 0x00


@dataclass(frozen=True)
class ObdResponse:
    mode: int
    pid: int
    payload: bytes
    negative: bool = False

    def __post_init__(self) -> None:
        if self.negative:
            return
        expected = {PID_SPEED: 1, PID_RPM: 2, PID_MAF: 2}
        if self.mode == MODE_CURRENT and self.pid in expected:
            if len(self.payload) != expected[self.pid]:
                raise ValueError(
                    f"PID {self.pid:#04x} payload must be {expected[self.pid]} bytes"
                )
        if self.mode == MODE_INFO and self.pid == PID_VIN and len(self.payload) != 17:
            raise ValueError("VIN payload must be 17 bytes")
        if self.mode == MODE_DTC and len(self.payload) % _DTC_CODE_LEN != 0:
            raise ValueError("DTC payload must be whole trouble codes")


REQ_SPEED = ObdRequest(MODE_CURRENT, PID_SPEED)
REQ_RPM = ObdRequest(MODE_CURRENT, PID_RPM)
REQ_MAF = ObdRequest(MODE_CURRENT, PID_MAF)
REQ_VIN = ObdRequest(MODE_INFO, PID_VIN)
REQ_DTC = ObdRequest(MODE_DTC)

_SUPPORTED = {
    (MODE_CURRENT, PID_SPEED),
    (MODE_CURRENT, PID_RPM),
    (MODE_CURRENT, PID_MAF),
    (MODE_INFO, PID_VIN),
    (MODE_DTC, 0x00),
}


def handle_obd_request(state: VehicleState, req: ObdRequest) -> ObdResponse:
    """Answer one request from a bus snapshot; unsupported -> negative."""
    key = (req.mode, req.pid if req.mode != MODE_DTC else 0x00)
    if key not in _SUPPORTED:
        return ObdResponse(
            NEGATIVE_RESPONSE_MODE,
            req.pid,
            bytes((req.mode, _NRC_NOT_SUPPORTED)),
            negative=True,
        )
    if req.mode == MODE_CURRENT and req.pid == PID_SPEED:
        v = int(round(min(255.0, max(0.0, state.speed_kmh))))
        return ObdResponse(req.mode, req.pid, bytes((v,)))
    if req.mode == MODE_CURRENT and req.pid == PID_RPM:
        quarters = int(round(min(65535.0, max(0.0, state.rpm * 4.0))))
        return ObdResponse(req.mode, req.pid, bytes(divmod(quarters, 256)))
    if req.mode == MODE_CURRENT and req.pid == PID_MAF:
        cents = int(round(min(65535.0, max(0.0, state.maf_gps * 100.0))))
        return ObdResponse(req.mode, req.pid, bytes(divmod(cents, 256)))
    if req.mode == MODE_INFO and req.pid == PID_VIN:
        return ObdResponse(req.mode, req.pid, state.vin.encode("ascii"))
    payload = "".join(state.dtc_codes).encode("ascii")
    return ObdResponse(MODE_DTC, 0x00, payload)


def decode_speed(resp: ObdResponse) -> int:
    _expect(resp, MODE_CURRENT, PID_SPEED)
    return resp.payload[0]


def decode_rpm(resp: ObdResponse) -> float:
    _expect(resp, MODE_CURRENT, PID_RPM)
    return (256 * resp.payload[0] + resp.payload[1]) / 4.0


def decode_maf(resp: ObdResponse) -> float:
    _expect(resp, MODE_CURRENT, PID_MAF)
    return (256 * resp.payload[0] + resp.payload[1]) / 100.0


def decode_vin(resp: ObdResponse) -> str:
    _expect(resp, MODE_INFO, PID_VIN)
    return resp.payload.decode("ascii")


def decode_dtcs(resp: ObdResponse) -> tuple[str, ...]:
    _expect(resp, MODE_DTC, 0x00)
    text = resp.payload.decode("ascii")
    return tuple(
        text[i : i + _DTC_CODE_LEN] for i in range(0, len(text), _DTC_CODE_LEN)
    )


def _expect(resp: ObdResponse, mode: int, pid: int) -> None:
    if resp.negative:
        raise ValueError(f"negative response for mode {resp.payload[0]:#04x}")
    if resp.mode != mode or resp.pid != pid:
        raise ValueError(f"response is for mode {resp.mode:#04x} pid {resp.pid:#04x}")


# ---------------------------------------------------------------------------
# Device state machine


class Phase(enum.Enum):
    IDLE = "Idle"
    IGNITION_DETECTED = "IgnitionDetected"
    IN_TRIP = "InTrip"
    SHUTOFF_PENDING = "ShutoffPending"


EVENT_TRIP_START = "TripStart"
EVENT_TRIP_END = "TripEnd"
EVENT_VIN_READ = "VinRead"
EVENT_DTC_READ = "DtcRead"
EVENT_HARD_BRAKE = "HardBrakeBeep"


@dataclass(frozen=True)
class TripEvent:
    t: float
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class DeviceConfig:
    hard_brake_threshold_kmh_per_s: int = 11  # ~7 mph per second
    collect_dtc: bool = True

    def __post_init__(self) -> None:
        if self.hard_brake_threshold_kmh_per_s < 1:
            raise ValueError("hard-brake threshold must be >= 1 km/h per second")


@dataclass(frozen=True)
class DeviceState:
    """Dongle state between ticks. last_reported_speed_kmh is only held
    while in a trip with at least one speed reply seen."""

    config: DeviceConfig = DeviceConfig()
    phase: Phase = Phase.IDLE
    last_reported_speed_kmh: int | None = None
    events: tuple[TripEvent, ...] = ()


def device_tick(
    dev: DeviceState, vehicle: VehicleState
) -> tuple[DeviceState, tuple[ObdRequest, ...], tuple[TripEvent, ...]]:
    """One polling tick: at most one phase transition per tick.

    Returns the successor state, the requests the device put on the bus,
    and any events it emitted this tick. Total over every (phase,
    snapshot) pair.
    """
    requests: list[ObdRequest] = []
    events: list[TripEvent] = []
    phase = dev.phase
    last = dev.last_reported_speed_kmh

    if phase is Phase.IDLE:
        if vehicle.voltage >= ENGINE_ON_VOLTAGE:
            phase = Phase.IGNITION_DETECTED
            requests.append(REQ_RPM)

    elif phase is Phase.IGNITION_DETECTED:
        if vehicle.voltage < ENGINE_ON_VOLTAGE:
            phase = Phase.IDLE
        elif vehicle.rpm > 0:
            phase = Phase.IN_TRIP
            events.append(TripEvent(vehicle.t, EVENT_TRIP_START))
            requests.append(REQ_VIN)
            vin = decode_vin(handle_obd_request(vehicle, REQ_VIN))
            events.append(TripEvent(vehicle.t, EVENT_VIN_READ, vin))
            if dev.config.collect_dtc:
                requests.append(REQ_DTC)
                codes = decode_dtcs(handle_obd_request(vehicle, REQ_DTC))
                events.append(TripEvent(vehicle.t, EVENT_DTC_READ, ";".join(codes)))
            requests.append(REQ_SPEED)
            last = decode_speed(handle_obd_request(vehicle, REQ_SPEED))
        else:
            requests.append(REQ_RPM)

    elif phase is Phase.IN_TRIP:
        if vehicle.voltage < ENGINE_ON_VOLTAGE:
            phase = Phase.SHUTOFF_PENDING
            last = None
            requests.extend((REQ_RPM, REQ_MAF))
        else:
            requests.append(REQ_SPEED)
            current = decode_speed(handle_obd_request(vehicle, REQ_SPEED))
            if last is not None and last - current >= dev.config.hard_brake_threshold_kmh_per_s:
                events.append(
                    TripEvent(vehicle.t, EVENT_HARD_BRAKE, f"{last}->{current} km/h")
                )
            last = current

    else:  # SHUTOFF_PENDING
        if vehicle.voltage < ENGINE_ON_VOLTAGE and vehicle.rpm == 0 and vehicle.maf_gps == 0:
            phase = Phase.IDLE
            events.append(TripEvent(vehicle.t, EVENT_TRIP_END))
        elif vehicle.voltage >= ENGINE_ON_VOLTAGE:
            # voltage came back before the engine readings died: the car
            # restarted (stop-start at a light); same trip continues
            phase = Phase.IN_TRIP
            requests.append(REQ_SPEED)
            last = decode_speed(handle_obd_request(vehicle, REQ_SPEED))
        else:
            requests.extend((REQ_RPM, REQ_MAF))

    new = replace(
        dev,
        phase=phase,
        last_reported_speed_kmh=last,
        events=dev.events + tuple(events),
    )
    return new, tuple(requests), tuple(events)


# ---------------------------------------------------------------------------
# Whole-session driver


@dataclass(frozen=True)
class SessionResult:
    observed: tuple[SpeedSample, ...]
    events: tuple[TripEvent, ...]
    device: DeviceState


def _states_from_trip(trip: RawTrip) -> list[VehicleState]:
    """Engine-on snapshots per speed sample, padded with engine-off ticks.

    A trip file records one ignition cycle but not the bus voltage, so the
    reconstruction assumes the engine ran across all samples and adds two
    off ticks on each side for the ignition/shutoff edges.
    """
    if not trip.speed:
        raise ValueError("cannot run a session on a trip without speed samples")
    ts = [s.t for s in trip.speed]
    dt = min((b - a) for a, b in zip(ts, ts[1:])) if len(ts) > 1 else 1.0

    def off(t: float) -> VehicleState:
        return VehicleState(t, 0.0, 0.0, 0.0, 12.0, trip.vin)

    states = [off(ts[0] - 2 * dt), off(ts[0] - dt)]
    for s in trip.speed:
        rpm, maf, voltage = engine_outputs(s.v_kmh, True)
        states.append(VehicleState(s.t, s.v_kmh, rpm, maf, voltage, trip.vin))
    states.extend((off(ts[-1] + dt), off(ts[-1] + 2 * dt)))
    return states


def run_session(
    trip_or_states: Union[RawTrip, Sequence[VehicleState]],
    config: DeviceConfig | None = None,
) -> SessionResult:
    """Drive a device over a trip (or an explicit snapshot stream).

    Returns the speed stream the device observed plus its event log. When
    given a RawTrip the stream is reconstructed engine-on (see
    _states_from_trip), so the observed series starts at the trip's second
    sample — the first tick is spent detecting ignition.
    """
    if isinstance(trip_or_states, RawTrip):
        states: Sequence[VehicleState] = _states_from_trip(trip_or_states)
    else:
        states = trip_or_states
    dev = DeviceState(config=config or DeviceConfig())
    observed: list[SpeedSample] = []
    for st in states:
        dev, requests, _ = device_tick(dev, st)
        if dev.phase is Phase.IN_TRIP and REQ_SPEED in requests:
            observed.append(SpeedSample(st.t, float(dev.last_reported_speed_kmh)))
    return SessionResult(tuple(observed), dev.events, dev)


def session_trip(trip: RawTrip, result: SessionResult) -> RawTrip:
    """Re-wrap a session's observed stream as a trip (accel passes through).

    Labels carry over by timestamp for the samples the device saw.
    """
    labels = None
    if trip.labels is not None:
        by_t = {s.t: l for s, l in zip(trip.speed, trip.labels)}
        labels = tuple(by_t.get(s.t, False) for s in result.observed)
    return RawTrip(
        vin=trip.vin,
        speed=result.observed,
        accel=trip.accel,
        labels=labels,
        scenario=trip.scenario,
        seed=trip.seed,
    )


# ---------------------------------------------------------------------------
# Event log persistence (JSON lines: {"t":..., "kind":..., "detail":...})


def write_events(events: Iterable[TripEvent], path: str) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps({"t": ev.t, "kind": ev.kind, "detail": ev.detail}))
            fh.write("\n")


def read_events(path: str) -> list[TripEvent]:
    events: list[TripEvent] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                events.append(TripEvent(float(obj["t"]), str(obj["kind"]), str(obj.get("detail", ""))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event line: {exc}") from exc
    return events
