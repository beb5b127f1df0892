"""Event data model, temporal windowing, and triplet window construction.

An event camera reports per-pixel brightness changes as (x, y, t, p)
quadruples. This module holds the stream container plus the windowing
operations everything downstream is built on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MICROSECONDS_PER_MS = 1_000


@dataclass(frozen=True)
class Event:
    """A single brightness-change event."""

    x: int
    y: int
    t: int  # integer microseconds
    p: int  # +1 or -1


@dataclass(frozen=True)
class TemporalWindow:
    """Half-open time interval (t_start, t_end], integer microseconds.

    The right endpoint is included so the newest event of a window is a
    member of the window built around it; the left endpoint is excluded
    so adjacent windows never share events.
    """

    t_start: int
    t_end: int

    def __post_init__(self) -> None:
        if self.t_end <= self.t_start:
            raise ValueError(f"empty window ({self.t_start}, {self.t_end}]")

    @property
    def dt(self) -> int:
        return self.t_end - self.t_start

    def contains(self, t: int | np.ndarray) -> bool | np.ndarray:
        return (t > self.t_start) & (t <= self.t_end)


class EventStream:
    """Events sorted by timestamp plus the sensor geometry.

    Construction sorts unsorted input stably by t (equal timestamps keep
    their given order) and validates that every event lies inside the
    sensor and has polarity exactly +1 or -1.
    """

    __slots__ = ("width", "height", "x", "y", "t", "p")

    def __init__(self, width, height, x, y, t, p):
        x = np.ascontiguousarray(x, dtype=np.int64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        t = np.ascontiguousarray(t, dtype=np.int64)
        p = np.ascontiguousarray(p, dtype=np.int64)
        if not (x.shape == y.shape == t.shape == p.shape) or x.ndim != 1:
            raise ValueError("x, y, t, p must be equal-length 1-D arrays")
        if width <= 0 or height <= 0:
            raise ValueError("sensor geometry must be positive")
        if x.size:
            if x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height:
                raise ValueError("event coordinates outside sensor geometry")
            if not np.isin(p, (-1, 1)).all():
                raise ValueError("polarity must be +1 or -1")
            if np.any(np.diff(t) < 0):
                order = np.argsort(t, kind="stable")
                x, y, t, p = x[order], y[order], t[order], p[order]
        for arr in (x, y, t, p):
            arr.flags.writeable = False
        self.width = int(width)
        self.height = int(height)
        self.x, self.y, self.t, self.p = x, y, t, p

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        evs = list(events)
        return cls(
            width,
            height,
            [e.x for e in evs],
            [e.y for e in evs],
            [e.t for e in evs],
            [e.p for e in evs],
        )

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.empty(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    def __len__(self) -> int:
        return self.t.size

    def __iter__(self):
        for i in range(self.t.size):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def slice(self, window: TemporalWindow) -> "EventStream":
        """Events with t_start < t <= t_end, order preserved."""
        # timestamps are sorted, so the window is a contiguous run
        lo = int(np.searchsorted(self.t, window.t_start, side="right"))
        hi = int(np.searchsorted(self.t, window.t_end, side="right"))
        return EventStream(
            self.width, self.height, self.x[lo:hi], self.y[lo:hi],
            self.t[lo:hi], self.p[lo:hi],
        )

    def latest_timestamp(self, window: TemporalWindow) -> int | None:
        """Largest timestamp inside the window, or None when it holds no events."""
        lo = int(np.searchsorted(self.t, window.t_start, side="right"))
        hi = int(np.searchsorted(self.t, window.t_end, side="right"))
        if hi <= lo:
            return None
        return int(self.t[hi - 1])


@dataclass(frozen=True)
class TripletConfig:
    """Durations for the three nested windows of one training sample.

    The low duration is fixed; the mid and high durations are drawn
    uniformly from inclusive integer ranges each time a triplet is built.
    """

    dt_l: int = 20_000
    dt_m_range: tuple[int, int] = (20_000, 35_000)
    dt_h_range: tuple[int, int] = (35_000, 50_000)

    def __post_init__(self) -> None:
        if not (self.dt_m_range[0] <= self.dt_m_range[1]
                and self.dt_h_range[0] <= self.dt_h_range[1]):
            raise ValueError("duration ranges must be nonempty")
        if self.dt_l <= 0:
            raise ValueError("dt_l must be positive")
        if self.dt_l > self.dt_m_range[0]:
            raise ValueError("dt_l must not exceed the mid range")
        if self.dt_m_range[1] > self.dt_h_range[0]:
            raise ValueError("mid range must not exceed the high range")


def centered_window(t_base: int, dt: int) -> TemporalWindow:
    half = dt // 2
    return TemporalWindow(t_base - half, t_base + (dt - half))


def triplet_windows(
    t_base: int, cfg: TripletConfig, rng: np.random.Generator
) -> tuple[TemporalWindow, TemporalWindow, TemporalWindow]:
    """Three windows centered on t_base with nested durations.

    Returns (W_h, W_m, W_l). The mid duration is drawn before the high
    one, so a fixed seed fixes both. Nesting W_l within W_m within W_h
    holds for every draw because the half-splits are monotone in dt.
    """
    if 2 * t_base < cfg.dt_h_range[1]:
        raise ValueError("t_base too early for the largest possible window")
    dt_m = int(rng.integers(cfg.dt_m_range[0], cfg.dt_m_range[1], endpoint=True))
    dt_h = int(rng.integers(cfg.dt_h_range[0], cfg.dt_h_range[1], endpoint=True))
    return (
        centered_window(t_base, dt_h),
        centered_window(t_base, dt_m),
        centered_window(t_base, cfg.dt_l),
    )
