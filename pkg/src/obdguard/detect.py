"""Posterior-predictive screening of speed variation records.

For each aligned record the detector draws S values from the posterior
predictive at that record's accelerometer vector (pick a retained draw
uniformly, pick a component by that draw's weights, sample the Gaussian),
forms the equal-tailed credible interval from order statistics, and flags
the record when the observed speed variation falls outside it.

The per-record score is the two-sided tail mass min(#{<=y}, #{>=y}) / S.
With the interval endpoints taken as the m-th smallest/largest sample
(m = ceil(S*(1-level)/2)), "y outside [a, b]" is *exactly* "score <
(1-level)/2" — no tie-breaking epsilons — so flags recomputed from scores
at other levels are identical to re-running with those levels on the same
samples, and raising the level can only unflag records.

Each record gets its own RNG substream derived from (seed, t), so
detection is deterministic and independent of record order or batching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mixture import PosteriorSamples
from .trace import AlignedRecord

DEFAULT_LEVEL = 0.95
DEFAULT_PREDICTIVE_DRAWS = 2000


@dataclass(frozen=True)
class PredictedRange:
    """Equal-tailed predictive interval [lo, hi] at one record.

    score is the observed value's two-sided tail mass (None when the
    range was computed without an observation).
    """

    t: int
    lo: float
    hi: float
    level: float
    score: float | None = None

    def __post_init__(self) -> None:
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval at t={self.t}: [{self.lo}, {self.hi}]")
        if self.score is not None and not (0.0 <= self.score <= 0.5):
            raise ValueError(f"score {self.score} outside [0, 0.5]")


@dataclass(frozen=True)
class RecordVerdict:
    t: int
    y: float
    range: PredictedRange
    flagged: bool


@dataclass(frozen=True)
class DetectionReport:
    records: tuple[RecordVerdict, ...]
    level: float

    @property
    def n_flagged(self) -> int:
        return sum(1 for r in self.records if r.flagged)

    def scores(self) -> np.ndarray:
        return np.array([r.range.score for r in self.records], dtype=float)

    def flags(self) -> np.ndarray:
        return np.array([r.flagged for r in self.records], dtype=bool)


class PredictiveSampler:
    """Vectorized posterior-predictive draws at a fixed posterior.

    Uniform-draw-then-weights is equivalent to one categorical over all
    (draw, component) pairs with mass weight/n_draws; the flattened
    cumulative makes each batch a single searchsorted.
    """

    def __init__(self, samples: PosteriorSamples) -> None:
        flat = (samples.weights / samples.n_draws).ravel()
        cum = np.cumsum(flat)
        self._cum = cum / cum[-1]
        self._coefs = samples.coefs.reshape(-1, 3)
        self._sd = np.sqrt(samples.variances.ravel())

    def draw(self, x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
        idx = np.searchsorted(self._cum, rng.random(size), side="right")
        idx = np.minimum(idx, self._cum.size - 1)
        return self._coefs[idx] @ np.asarray(x, dtype=float) + self._sd[idx] * rng.standard_normal(size)


def predictive_samples(
    x: Sequence[float],
    samples: PosteriorSamples,
    size: int = DEFAULT_PREDICTIVE_DRAWS,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """S draws of y from the posterior predictive at covariates x."""
    if size < 1:
        raise ValueError("need at least one predictive draw")
    return PredictiveSampler(samples).draw(
        np.asarray(x, dtype=float), size, rng or np.random.default_rng()
    )


def _interval(sorted_draws: np.ndarray, level: float) -> tuple[float, float, int]:
    size = sorted_draws.size
    m = math.ceil(size * (1.0 - level) / 2.0)
    m = max(1, m)
    return float(sorted_draws[m - 1]), float(sorted_draws[size - m]), m


def _score(sorted_draws: np.ndarray, y: float) -> float:
    size = sorted_draws.size
    n_le = int(np.searchsorted(sorted_draws, y, side="right"))
    n_ge = size - int(np.searchsorted(sorted_draws, y, side="left"))
    # ties with y can push both counts past size/2; the cap keeps the score
    # in [0, 0.5] without disturbing any comparison against (1-level)/2
    return min(min(n_le, n_ge) / size, 0.5)


def predicted_range(
    x: Sequence[float],
    samples: PosteriorSamples,
    level: float = DEFAULT_LEVEL,
    size: int = DEFAULT_PREDICTIVE_DRAWS,
    rng: np.random.Generator | None = None,
    *,
    t: int = 0,
    y: float | None = None,
) -> PredictedRange:
    """Credible range at x; score filled in when y is supplied."""
    _check_level(level)
    draws = np.sort(predictive_samples(x, samples, size, rng))
    lo, hi, _ = _interval(draws, level)
    return PredictedRange(t, lo, hi, level, None if y is None else _score(draws, y))


def classify(
    record: AlignedRecord,
    sampler: PredictiveSampler | PosteriorSamples,
    level: float = DEFAULT_LEVEL,
    size: int = DEFAULT_PREDICTIVE_DRAWS,
    rng: np.random.Generator | None = None,
) -> RecordVerdict:
    """Range + score + flag for one record from one shared sample batch."""
    _check_level(level)
    if size < 1:
        raise ValueError("need at least one predictive draw")
    if isinstance(sampler, PosteriorSamples):
        sampler = PredictiveSampler(sampler)
    rng = rng or np.random.default_rng()
    draws = np.sort(sampler.draw(np.asarray(record.x, dtype=float), size, rng))
    lo, hi, _ = _interval(draws, level)
    score = _score(draws, record.y)
    flagged = record.y < lo or record.y > hi
    rng_range = PredictedRange(record.t, lo, hi, level, score)
    return RecordVerdict(record.t, record.y, rng_range, flagged)


def detect_trip(
    records: Sequence[AlignedRecord],
    samples: PosteriorSamples,
    level: float = DEFAULT_LEVEL,
    size: int = DEFAULT_PREDICTIVE_DRAWS,
    seed: int = 0,
) -> DetectionReport:
    """Classify every record of a trip.

    Record t indexes the RNG substream (default_rng seeded with
    [seed, t]), so adding or removing records never changes the verdicts
    of the others.
    """
    _check_level(level)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    sampler = PredictiveSampler(samples)
    verdicts = tuple(
        classify(r, sampler, level, size, np.random.default_rng([seed, r.t]))
        for r in records
    )
    return DetectionReport(verdicts, level)


def flags_at_level(report: DetectionReport, level: float) -> np.ndarray:
    """Flags the report would carry at another level, from stored scores.

    Exact, not approximate: the order-statistic interval makes
    "outside [a, b]" and "score < (1-level)/2" the same predicate on one
    sample batch.
    """
    _check_level(level)
    return report.scores() < (1.0 - level) / 2.0


def _check_level(level: float) -> None:
    if not (0.0 < level < 1.0):
        raise ValueError(f"credible level must be inside (0, 1), got {level}")


# ---------------------------------------------------------------------------
# Report persistence: one meta line, then one JSON object per record with
# wire keys {"t", "y", "a", "b", "score", "flagged"}.


def write_report(report: DetectionReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {
                    "level": report.level,
                    "n_records": len(report.records),
                    "n_flagged": report.n_flagged,
                }
            )
            + "\n"
        )
        for r in report.records:
            fh.write(
                json.dumps(
                    {
                        "t": r.t,
                        "y": r.y,
                        "a": r.range.lo,
                        "b": r.range.hi,
                        "score": r.range.score,
                        "flagged": r.flagged,
                    }
                )
                + "\n"
            )


def read_report(path: str) -> DetectionReport:
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ValueError(f"{path}: empty report")
    try:
        meta = json.loads(lines[0])
        level = float(meta["level"])
        verdicts = []
        for ln in lines[1:]:
            obj = json.loads(ln)
            rng_range = PredictedRange(
                int(obj["t"]), float(obj["a"]), float(obj["b"]), level, float(obj["score"])
            )
            flagged = bool(obj["flagged"])
            y = float(obj["y"])
            if flagged != (y < rng_range.lo or y > rng_range.hi):
                raise ValueError(f"flag inconsistent with interval at t={obj['t']}")
            verdicts.append(RecordVerdict(int(obj["t"]), y, rng_range, flagged))
        report = DetectionReport(tuple(verdicts), level)
        if int(meta["n_flagged"]) != report.n_flagged or int(meta["n_records"]) != len(verdicts):
            raise ValueError("meta line counts disagree with records")
        return report
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: bad report: {exc}") from exc
