"""Deterministic synthetic event streams with exact ground-truth geometry.

A planar intensity pattern moves under a time-parameterized homography.
Per pixel, the generator tracks a reference level and emits an event
each time the rendered intensity crosses it by the contrast threshold,
with the timestamp linearly interpolated inside the simulation step.
Uniform background noise is appended at a configurable rate. The whole
stream is a pure function of the config, including its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .geometry import (
    Match,
    compose_about_center,
    normalize_homography,
    warp_frame,
    warp_points,
)

PATTERNS = ("checkerboard", "random_polygons", "single_square")


@dataclass(frozen=True)
class MotionParams:
    """Pose parameters interpolated linearly over the sequence."""

    dx: float = 0.0
    dy: float = 0.0
    angle: float = 0.0
    scale: float = 1.0
    px: float = 0.0
    py: float = 0.0

    def lerp(self, other: "MotionParams", u: float) -> "MotionParams":
        return MotionParams(
            self.dx + u * (other.dx - self.dx),
            self.dy + u * (other.dy - self.dy),
            self.angle + u * (other.angle - self.angle),
            self.scale + u * (other.scale - self.scale),
            self.px + u * (other.px - self.px),
            self.py + u * (other.py - self.py),
        )


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    pattern: str = "checkerboard"
    motion_start: MotionParams = field(default_factory=MotionParams)
    motion_end: MotionParams = field(default_factory=lambda: MotionParams(dx=8.0))
    duration_us: int = 200_000
    contrast: float = 0.25
    step_us: int = 1_000
    noise_rate: float = 0.0  # events per pixel per second
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.step_us <= 0 or self.step_us > 1_000:
            raise ValueError("step_us must be in (0, 1000]")
        if self.duration_us < 10 * self.step_us:
            raise ValueError("duration must cover at least 10 steps")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if self.noise_rate < 0:
            raise ValueError("noise rate must be nonnegative")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame size must be positive")


def _base_pattern(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Intensity image in [0, 1] before any motion is applied."""
    h, w = cfg.height, cfg.width
    if cfg.pattern == "checkerboard":
        cell = max(4, min(h, w) // 8)
        yy, xx = np.mgrid[0:h, 0:w]
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
    if cfg.pattern == "single_square":
        img = np.zeros((h, w))
        side = min(h, w) // 3
        y0, x0 = (h - side) // 2, (w - side) // 2
        img[y0:y0 + side, x0:x0 + side] = 1.0
        return img
    # random_polygons: overlapping filled convex quads at random intensities
    img = np.full((h, w), 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = max(6, (h * w) // 400)
    for _ in range(n_shapes):
        cx = rng.uniform(0.1 * w, 0.9 * w)
        cy = rng.uniform(0.1 * h, 0.9 * h)
        radius = rng.uniform(0.06, 0.22) * min(h, w)
        phases = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=4))
        corners = np.stack(
            [cx + radius * np.cos(phases), cy + radius * np.sin(phases)], axis=1
        )
        level = rng.uniform(0.0, 1.0)
        inside = np.ones((h, w), dtype=bool)
        for i in range(4):
            x1, y1 = corners[i]
            x2, y2 = corners[(i + 1) % 4]
            inside &= (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1) >= 0
        img[inside] = level
    return img


class SyntheticSequence:
    """Generated events plus exact geometry accessors."""

    def __init__(self, cfg: SceneConfig, events: EventStream,
                 base: np.ndarray, base_mask: np.ndarray,
                 corners: np.ndarray):
        self.cfg = cfg
        self.events = events
        self._base = base
        self._base_mask = base_mask
        self._corners = corners  # (N, 2) pattern-frame corner points

    def pose(self, t: int) -> np.ndarray:
        """Homography placing the base pattern into the frame at time t."""
        u = min(max(t / self.cfg.duration_us, 0.0), 1.0)
        p = self.cfg.motion_start.lerp(self.cfg.motion_end, u)
        return compose_about_center(
            self.cfg.width, self.cfg.height,
            p.dx, p.dy, p.angle, p.scale, p.px, p.py,
        )

    def gt_homography(self, t1: int, t2: int) -> np.ndarray:
        """Exact map from frame coordinates at t1 to coordinates at t2."""
        return normalize_homography(self.pose(t2) @ np.linalg.inv(self.pose(t1)))

    def planar_mask(self, t: int) -> np.ndarray:
        """Boolean mask of pixels covered by the pattern at time t."""
        warped, valid = warp_frame(self.pose(t), self._base_mask, fill=0.0)
        return (warped > 0.5) & valid

    def corner_tracks(self, t: int) -> np.ndarray:
        """Pattern corner positions at time t, (N, 2)."""
        return warp_points(self.pose(t), self._corners)


def _render(seq_base: np.ndarray, pose: np.ndarray) -> np.ndarray:
    out, _ = warp_frame(pose, seq_base, fill=0.0)
    return out


def generate(cfg: SceneConfig) -> SyntheticSequence:
    """Simulate the scene and return its events plus geometry handles."""
    rng = np.random.default_rng(cfg.seed)
    base = _base_pattern(cfg, rng)
    h, w = base.shape

    # interior region counts as "on the pattern" for masks and sampling
    margin = max(2, min(h, w) // 16)
    base_mask = np.zeros((h, w))
    base_mask[margin:h - margin, margin:w - margin] = 1.0
    corners = np.array(
        [
            [margin, margin],
            [w - 1 - margin, margin],
            [w - 1 - margin, h - 1 - margin],
            [margin, h - 1 - margin],
        ],
        dtype=np.float64,
    )

    seq = SyntheticSequence(cfg, EventStream.empty(w, h), base, base_mask, corners)

    xs_all: list[np.ndarray] = []
    ys_all: list[np.ndarray] = []
    ts_all: list[np.ndarray] = []
    ps_all: list[np.ndarray] = []

    prev = _render(base, seq.pose(0))
    ref = prev.copy()
    c = cfg.contrast
    t_prev = 0
    for t_now in range(cfg.step_us, cfg.duration_us + 1, cfg.step_us):
        cur = _render(base, seq.pose(t_now))
        diff = cur - ref
        n_pos = np.clip(np.floor(diff / c), 0, None).astype(np.int64)
        n_neg = np.clip(np.floor(-diff / c), 0, None).astype(np.int64)
        counts = np.maximum(n_pos, n_neg)
        top = int(counts.max()) if counts.size else 0
        slope = cur - prev
        for m in range(1, top + 1):
            for n_cross, sign in ((n_pos, 1), (n_neg, -1)):
                hit = n_cross >= m
                if not hit.any():
                    continue
                yy, xx = np.nonzero(hit)
                level = ref[hit] + sign * m * c
                ds = slope[hit]
                frac = np.where(
                    np.abs(ds) > 1e-12, (level - prev[hit]) / ds, 1.0
                )
                frac = np.clip(frac, 0.0, 1.0)
                tt = np.floor(t_prev + frac * (t_now - t_prev) + 0.5).astype(np.int64)
                tt = np.clip(tt, t_prev + 1, t_now)
                xs_all.append(xx)
                ys_all.append(yy)
                ts_all.append(tt)
                ps_all.append(np.full(xx.size, sign, dtype=np.int64))
        ref = ref + n_pos * c - n_neg * c
        prev = cur
        t_prev = t_now

    if cfg.noise_rate > 0:
        lam = cfg.noise_rate * w * h * cfg.duration_us / 1e6
        n_noise = int(rng.poisson(lam))
        if n_noise:
            xs_all.append(rng.integers(0, w, size=n_noise))
            ys_all.append(rng.integers(0, h, size=n_noise))
            ts_all.append(rng.integers(0, cfg.duration_us, size=n_noise,
                                       endpoint=True))
            ps_all.append(rng.choice((-1, 1), size=n_noise))

    if xs_all:
        events = EventStream(
            w, h,
            np.concatenate(xs_all), np.concatenate(ys_all),
            np.concatenate(ts_all), np.concatenate(ps_all),
        )
    else:
        events = EventStream.empty(w, h)
    seq.events = events
    return seq


def gt_correspondences(
    seq: SyntheticSequence, t1: int, t2: int, n: int, rng: np.random.Generator
) -> list:
    """Exact correspondences between frame coordinates at t1 and t2.

    Points are drawn on the pattern at t1, kept only when both endpoints
    land inside the frame and on the pattern, and mapped through the
    ground-truth homography.
    """
    h1 = seq.pose(t1)
    g12 = seq.gt_homography(t1, t2)
    mask1 = seq.planar_mask(t1)
    mask2 = seq.planar_mask(t2)
    hh, ww = mask1.shape
    out = []
    attempts = 0
    while len(out) < n and attempts < 200 * n:
        attempts += 1
        bx = rng.uniform(0, ww - 1)
        by = rng.uniform(0, hh - 1)
        pa = warp_points(h1, np.array([bx, by]))
        xi, yi = int(np.floor(pa[0] + 0.5)), int(np.floor(pa[1] + 0.5))
        if not (0 <= xi < ww and 0 <= yi < hh and mask1[yi, xi]):
            continue
        pb = warp_points(g12, pa)
        xj, yj = int(np.floor(pb[0] + 0.5)), int(np.floor(pb[1] + 0.5))
        if not (0 <= xj < ww and 0 <= yj < hh and mask2[yj, xj]):
            continue
        out.append(Match(a=(float(pa[0]), float(pa[1])),
                         b=(float(pb[0]), float(pb[1]))))
    return out
