"""Encode event windows into frames.

Three encodings are provided. All of them resolve per-pixel collisions
the same way: the event with the largest timestamp wins, and events
sharing that timestamp are resolved by stream order (last one wins).

* tencode: 3 channels. Positive events paint (255, g, 0), negative
  events (0, g, 255), with g = round(255 * (t_max - t) / dt), so the
  green channel ages from 0 (newest) to 255 (oldest). No event: (0,0,0).
* time surface: 1 channel, round(255 * (t - (t_max - dt)) / dt), newest
  events brightest, background 0.
* time window: 1 channel holding only the latest polarity, 255 positive,
  0 negative, 128 where no event landed.

Frames are uint8 numpy arrays, (H, W, 3) or (H, W), marked read-only.
"""

from __future__ import annotations

import enum

import numpy as np

from .events import EventStream, TemporalWindow, TripletConfig, triplet_windows

# Rec. 601 luminance weights for the 3-channel -> gray reduction
_LUMA = (0.299, 0.587, 0.114)

TIME_WINDOW_BACKGROUND = 128


class Representation(enum.Enum):
    TENCODE = "tencode"
    TIME_SURFACE = "tsurface"
    TIME_WINDOW = "twindow"


def _round_half_up(v: np.ndarray) -> np.ndarray:
    # round half away from zero; inputs here are always >= 0
    return np.floor(v + 0.5)


def _latest_per_pixel(stream: EventStream) -> np.ndarray:
    """Indices of the per-pixel winning events, in stream order.

    The stream is sorted by t with ties in original order, so the last
    occurrence of each pixel is the winner.
    """
    lin = stream.y * stream.width + stream.x
    # first occurrence in the reversed array = last occurrence overall
    _, first_rev = np.unique(lin[::-1], return_index=True)
    return np.sort(lin.size - 1 - first_rev)


def _check_range(stream: EventStream, t_max: int, dt: int) -> None:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if stream.t.size and (stream.t.min() < t_max - dt or stream.t.max() > t_max):
        raise ValueError("event timestamps outside [t_max - dt, t_max]")


def encode_tencode(stream: EventStream, t_max: int, dt: int) -> np.ndarray:
    """Encode a window of events as an (H, W, 3) polarity/recency frame."""
    _check_range(stream, t_max, dt)
    frame = np.zeros((stream.height, stream.width, 3), dtype=np.uint8)
    if stream.t.size:
        win = _latest_per_pixel(stream)
        xs, ys = stream.x[win], stream.y[win]
        g = _round_half_up(255.0 * (t_max - stream.t[win]) / dt)
        g = np.clip(g, 0, 255).astype(np.uint8)
        pos = stream.p[win] > 0
        frame[ys[pos], xs[pos], 0] = 255
        frame[ys, xs, 1] = g
        frame[ys[~pos], xs[~pos], 2] = 255
    frame.flags.writeable = False
    return frame


def encode_time_surface(stream: EventStream, t_max: int, dt: int) -> np.ndarray:
    """Encode latest-event recency as an (H, W) frame, newest = 255."""
    _check_range(stream, t_max, dt)
    frame = np.zeros((stream.height, stream.width), dtype=np.uint8)
    if stream.t.size:
        win = _latest_per_pixel(stream)
        v = _round_half_up(255.0 * (stream.t[win] - (t_max - dt)) / dt)
        frame[stream.y[win], stream.x[win]] = np.clip(v, 0, 255).astype(np.uint8)
    frame.flags.writeable = False
    return frame


def encode_time_window(stream: EventStream) -> np.ndarray:
    """Encode latest-event polarity as an (H, W) frame.

    255 positive, 0 negative, 128 where the window holds no event.
    """
    frame = np.full(
        (stream.height, stream.width), TIME_WINDOW_BACKGROUND, dtype=np.uint8
    )
    if stream.t.size:
        win = _latest_per_pixel(stream)
        frame[stream.y[win], stream.x[win]] = np.where(stream.p[win] > 0, 255, 0)
    frame.flags.writeable = False
    return frame


def to_grayscale(frame: np.ndarray, channel: int | None = None) -> np.ndarray:
    """Reduce an (H, W, 3) frame to (H, W).

    Default is the standard luminance combination; passing a channel
    index selects that channel alone instead.
    """
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) frame")
    if channel is not None:
        out = frame[:, :, channel].copy()
        out.flags.writeable = False
        return out
    v = (
        _LUMA[0] * frame[:, :, 0].astype(np.float64)
        + _LUMA[1] * frame[:, :, 1]
        + _LUMA[2] * frame[:, :, 2]
    )
    out = _round_half_up(v).astype(np.uint8)
    out.flags.writeable = False
    return out


def encode_window(
    stream: EventStream, window: TemporalWindow, rep: Representation
) -> np.ndarray:
    """Slice one window and encode it as a single-channel frame.

    t_max is the timestamp of the latest event actually inside the
    window, not the window edge; an eventless window yields the
    representation's background frame.
    """
    sub = stream.slice(window)
    if rep is Representation.TIME_WINDOW:
        return encode_time_window(sub)
    t_max = sub.latest_timestamp(window)
    if t_max is None:
        t_max = window.t_end
    if rep is Representation.TENCODE:
        return to_grayscale(encode_tencode(sub, t_max, window.dt))
    return encode_time_surface(sub, t_max, window.dt)


def encode_triplet(
    stream: EventStream,
    t_base: int,
    cfg: TripletConfig,
    rep: Representation,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build the three nested windows around t_base and encode each.

    Returns (F_h, F_m, F_l) single-channel frames, largest window first.
    """
    w_h, w_m, w_l = triplet_windows(t_base, cfg, rng)
    return (
        encode_window(stream, w_h, rep),
        encode_window(stream, w_m, rep),
        encode_window(stream, w_l, rep),
    )
