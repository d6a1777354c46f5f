"""Telematics speed-stream simulation, manipulation, and detection toolkit.

The package models the data path of an aftermarket OBD-II telematics dongle
(speed polled over the diagnostic port once per second, an onboard
three-axis accelerometer sampled much faster), two ways an adversary can
falsify the
speed channel (replaying an old recording, or flattening hard decelerations
in transit), and a detector that checks reported speed variation against the
trusted accelerometer using a Dirichlet-process mixture of Gaussian linear
regressions fitted by blocked Gibbs sampling.
"""

from __future__ import annotations

from .trace import (
    KMH_TO_MS,
    AccelSample,
    AlignedRecord,
    RawTrip,
    SpeedSample,
    TraceFormatError,
    read_aligned,
    read_trip,
    records_to_arrays,
    write_aligned,
    write_trip,
)

__all__ = [
    "KMH_TO_MS",
    "AccelSample",
    "AlignedRecord",
    "RawTrip",
    "SpeedSample",
    "TraceFormatError",
    "read_aligned",
    "read_trip",
    "records_to_arrays",
    "write_aligned",
    "write_trip",
]

__version__ = "0.1.0"
