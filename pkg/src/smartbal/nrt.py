"""TSO publication of near-real-time (NRT) imbalance data.

Each published element is a pair of bounds on the average FRR demand of one
minute; exact publication is the special case ``lower == upper`` and missing
data is ``(-inf, +inf)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("E", "Es", "Is", "El", "Il")
_LONG_NAMES = {
    "Exact": "E",
    "ExactWithCentralInterval": "Es",
    "UniformIntervals": "Is",
    "ExactWithLargeCentralInterval": "El",
    "IntervalsWithLargeCentral": "Il",
}


@dataclass(frozen=True)
class NrtScenario:
    kind: str = "E"
    delay: float = 60.0
    small_interval: tuple[float, float] = (-120.0, 120.0)
    large_interval: tuple[float, float] = (-900.0, 970.0)
    uniform_width: float = 240.0
    bin_anchor: str = "zero"      # "zero": [0, w), [w, 2w) ...; "centered": [-w/2, w/2) ...
    t_nrt: float = 60.0

    def __post_init__(self):
        kind = _LONG_NAMES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown NRT scenario kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.delay < 0:
            raise ValueError("delay must be non-negative")
        for lo, hi in (self.small_interval, self.large_interval):
            if not lo <= hi:
                raise ValueError(f"interval bounds out of order: ({lo}, {hi})")
        if self.uniform_width <= 0:
            raise ValueError("uniform_width must be positive")
        if self.bin_anchor not in ("zero", "centered"):
            raise ValueError(f"unknown bin_anchor {self.bin_anchor!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}-{int(self.delay)}s"

    @classmethod
    def from_dict(cls, d: dict) -> "NrtScenario":
        d = dict(d)
        if "delay_s" in d:
            d["delay"] = d.pop("delay_s")
        for key in ("small_interval", "large_interval"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class NrtBulletin:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def exact(self) -> np.ndarray:
        return np.flatnonzero(self.lower == self.upper)

    @property
    def interval(self) -> np.ndarray:
        finite = np.isfinite(self.lower) | np.isfinite(self.upper)
        return np.flatnonzero(finite & (self.lower != self.upper))

    @property
    def future(self) -> np.ndarray:
        return np.flatnonzero(np.isneginf(self.lower) & np.isposinf(self.upper))

    def ranges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Index partition ``(R_E, R_I, R_F)`` (0-based)."""
        return self.exact, self.interval, self.future


def _bin(avg: float, width: float, anchor: str) -> tuple[float, float]:
    offset = 0.0 if anchor == "zero" else -0.5 * width
    lo = math.floor((avg - offset) / width) * width + offset
    return lo, lo + width


def bin_value(avg: float, scenario: NrtScenario) -> tuple[float, float]:
    """Published ``(lower, upper)`` for one minute average."""
    kind = scenario.kind
    if kind == "E":
        return avg, avg
    if kind == "Es":
        lo, hi = scenario.small_interval
        return (lo, hi) if lo <= avg <= hi else (avg, avg)
    if kind == "Is":
        return _bin(avg, scenario.uniform_width, scenario.bin_anchor)
    lo, hi = scenario.large_interval
    if lo <= avg <= hi:
        return lo, hi
    if kind == "El":
        return avg, avg
    return _bin(avg, scenario.uniform_width, scenario.bin_anchor)


def published_count(now: float, scenario: NrtScenario) -> int:
    """Number of leading minutes whose data is available at time ``now``."""
    # minute i (1-based) is available when i * T_NRT <= now - delay
    return max(0, int(math.floor((now - scenario.delay) / scenario.t_nrt + 1e-9)))


def publish(minute_averages, now: float, scenario: NrtScenario, n: int | None = None) -> NrtBulletin:
    """Bulletin over a horizon of ``n`` minutes (default: ``len(minute_averages)``)."""
    avgs = np.asarray(minute_averages, dtype=float)
    n = len(avgs) if n is None else n
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    count = min(published_count(now, scenario), n)
    if count > len(avgs):
        raise ValueError(f"minute averages cover {len(avgs)} minutes, {count} are due at t={now}")
    for i in range(count):
        lower[i], upper[i] = bin_value(float(avgs[i]), scenario)
    return NrtBulletin(lower, upper)
