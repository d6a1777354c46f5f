import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obdguard.attack import (
    FlattenConfig,
    ReplayConfig,
    flatten_attack,
    flatten_speeds,
    replay_attack,
)
from obdguard.trace import AccelSample, RawTrip, SpeedSample

VIN = "1HGCM82633A004352"


def _trip(values, labels=None, t0=0.0):
    speed = tuple(SpeedSample(t0 + i, float(v)) for i, v in enumerate(values))
    accel = tuple(
        AccelSample(t0 + i * 0.5, 0.1 * i, 0.0, 9.81) for i in range(2 * len(values))
    )
    return RawTrip(VIN, speed, accel, labels=labels)


# ---------------------------------------------------------------------------
# Flattening


def test_flatten_config_validation():
    with pytest.raises(ValueError):
        FlattenConfig(threshold_kmh_per_s=0)


def test_flatten_passthrough_below_threshold():
    out, labels = flatten_speeds([50, 45, 40, 36, 40], FlattenConfig(11))
    assert out == [50, 45, 40, 36, 40]
    assert labels == [False] * 5


def test_flatten_worked_example():
    # a 30 km/h/s emergency stop walked down at 10 km/h per tick
    out, labels = flatten_speeds([100, 70, 40, 40, 40, 40, 40], FlattenConfig(11))
    assert out == [100, 90, 80, 70, 60, 50, 40]
    assert labels == [False, True, True, True, True, True, False]


def test_flatten_single_big_drop():
    out, labels = flatten_speeds([60, 40, 40], FlattenConfig(11))
    assert out == [60, 50, 40]
    assert labels == [False, True, False]


def test_flatten_threshold_boundary():
    # drop of exactly threshold is hidden; threshold-1 passes
    out, labels = flatten_speeds([50, 39], FlattenConfig(11))
    assert out == [50, 40] and labels == [False, True]
    out, labels = flatten_speeds([50, 40], FlattenConfig(11))
    assert out == [50, 40] and labels == [False, False]


def test_flatten_tracks_reported_not_honest():
    # after hiding one drop, the next comparison is against the lie
    out, _ = flatten_speeds([50, 30, 30], FlattenConfig(11))
    assert out == [50, 40, 30]


speed_lists = st.lists(st.integers(0, 255), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(speed_lists, st.integers(1, 30))
def test_flatten_never_shows_supra_threshold_drop(values, threshold):
    out, labels = flatten_speeds(values, FlattenConfig(threshold))
    assert len(out) == len(values)
    drops = [a - b for a, b in zip(out, out[1:])]
    assert all(d < threshold for d in drops)
    for v, o, l in zip(values, out, labels):
        assert l == (v != o)
        assert o >= v  # the lie only ever reports too fast


@settings(max_examples=200, deadline=None)
@given(speed_lists, st.integers(1, 30))
def test_flatten_is_identity_on_gentle_streams(values, threshold):
    gentle = []
    for v in values:
        if gentle and gentle[-1] - v >= threshold:
            v = gentle[-1] - threshold + 1
        gentle.append(v)
    out, labels = flatten_speeds(gentle, FlattenConfig(threshold))
    assert out == gentle
    assert not any(labels)


def test_flatten_attack_wraps_trip():
    trip = _trip([100, 70, 40, 40, 40, 40, 40])
    attacked = flatten_attack(trip, FlattenConfig(11))
    assert [s.v_kmh for s in attacked.speed] == [100, 90, 80, 70, 60, 50, 40]
    assert attacked.labels == (False, True, True, True, True, True, False)
    assert attacked.accel == trip.accel
    assert [s.t for s in attacked.speed] == [s.t for s in trip.speed]


def test_flatten_attack_preserves_existing_labels():
    trip = _trip([50, 49, 48], labels=(True, False, False))
    attacked = flatten_attack(trip)
    assert attacked.labels == (True, False, False)


def test_flatten_attack_default_threshold_is_11():
    trip = _trip([50, 39])
    assert [s.v_kmh for s in flatten_attack(trip).speed] == [50, 40]


# ---------------------------------------------------------------------------
# Replay


def test_replay_config_validation():
    with pytest.raises(ValueError, match="non-empty"):
        ReplayConfig(RawTrip(VIN, (), ()))
    tampered = _trip([10, 20], labels=(False, True))
    with pytest.raises(ValueError, match="honest"):
        ReplayConfig(tampered)


def test_replay_substitutes_on_live_clock():
    live = _trip([0, 5, 10, 15], t0=100.0)
    recorded = _trip([30, 31, 32, 33])
    out = replay_attack(live, ReplayConfig(recorded))
    assert [s.t for s in out.speed] == [100.0, 101.0, 102.0, 103.0]
    assert [s.v_kmh for s in out.speed] == [30, 31, 32, 33]
    assert out.labels == (True, True, True, True)
    assert out.accel == live.accel


def test_replay_loops_shorter_recording():
    live = _trip([0, 0, 0, 0, 0, 0, 0])
    recorded = _trip([10, 20, 30])
    out = replay_attack(live, ReplayConfig(recorded))
    assert [s.v_kmh for s in out.speed] == [10, 20, 30, 10, 20, 30, 10]


def test_replay_labels_only_where_values_differ():
    live = _trip([10, 21, 30])
    recorded = _trip([10, 20, 30])
    out = replay_attack(live, ReplayConfig(recorded))
    assert out.labels == (False, True, False)


def test_replay_keeps_existing_labels():
    live = _trip([10, 20], labels=(True, False))
    recorded = _trip([10, 20])
    out = replay_attack(live, ReplayConfig(recorded))
    assert out.labels == (True, False)


def test_replay_honest_recording_without_labels_accepted():
    recorded = RawTrip(VIN, (SpeedSample(0.0, 5.0),), ())
    assert ReplayConfig(recorded).recorded is recorded
