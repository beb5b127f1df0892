"""Evaluation protocols: stereo disparity precision, mask-based matching
score, homography reprojection error, and keypoint repeatability.

Protocols that can come up empty (no valid matches, too few inliers)
return None instead of a number so callers can count failures without
poisoning the averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, TemporalWindow
from .features import FeaturePipeline, match
from .geometry import (
    DegenerateGeometryError,
    Match,
    ransac_homography,
    reprojection_error,
    warp_points,
)
from .representation import Representation, encode_window


@dataclass
class DisparityMap:
    """Per-pixel horizontal stereo offsets with a sparse validity mask."""

    values: np.ndarray  # (H, W) float
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self) -> None:
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("values and valid must be equal-shape 2-D arrays")
        if self.valid.any() and np.nanmin(self.values[self.valid]) < 0:
            raise ValueError("valid disparities must be nonnegative")


@dataclass
class EvalReport:
    """Aggregated run results for the CLI and tests."""

    precisions: dict[float, float | None] = field(default_factory=dict)
    n_samples: int = 0
    n_valid: int = 0
    mean_reprojection_error: float | None = None
    iou_score: float | None = None


def _round_idx(v: float) -> int:
    return int(np.floor(v + 0.5))


def disparity_precision(
    matches, dmap: DisparityMap, sigma: float
) -> float | None:
    """Fraction of valid matches landing near the true stereo partner.

    A match (a in left, b in right) is valid when the disparity map has
    a value at a's rounded pixel; it is correct when b lies within sigma
    of (a.x - d, a.y) on both axes. None when nothing is valid.
    """
    h, w = dmap.values.shape
    n_valid = 0
    n_correct = 0
    for m in matches:
        xi, yi = _round_idx(m.a[0]), _round_idx(m.a[1])
        if not (0 <= xi < w and 0 <= yi < h and dmap.valid[yi, xi]):
            continue
        n_valid += 1
        d = float(dmap.values[yi, xi])
        if abs(m.b[0] - (m.a[0] - d)) < sigma and abs(m.b[1] - m.a[1]) < sigma:
            n_correct += 1
    if n_valid == 0:
        return None
    return n_correct / n_valid


def iou_matching_score(matches, mask_a: np.ndarray, mask_b: np.ndarray) -> float | None:
    """Fraction of matches whose endpoints both land inside their masks."""
    matches = list(matches)
    if not matches:
        return None
    ha, wa = mask_a.shape
    hb, wb = mask_b.shape
    n_correct = 0
    for m in matches:
        xa, ya = _round_idx(m.a[0]), _round_idx(m.a[1])
        xb, yb = _round_idx(m.b[0]), _round_idx(m.b[1])
        in_a = 0 <= xa < wa and 0 <= ya < ha and bool(mask_a[ya, xa])
        in_b = 0 <= xb < wb and 0 <= yb < hb and bool(mask_b[yb, xb])
        if in_a and in_b:
            n_correct += 1
    return n_correct / len(matches)


def reprojection_eval(
    stream: EventStream,
    t1: int,
    t2: int,
    pipeline: FeaturePipeline,
    dt: int = 10_000,
    planar_mask=None,
    representation: Representation = Representation.TENCODE,
    ransac_threshold: float = 2.0,
    ransac_iters: int = 2000,
    rng: np.random.Generator | None = None,
    matches_override: list[Match] | None = None,
) -> float | None:
    """Estimate the t2 -> t1 homography from matched features and score it.

    Windows (t1, t1 + dt] and (t2, t2 + dt] are encoded and matched;
    matches leaving the planar mask (one mask, or a (mask1, mask2) pair)
    are dropped; RANSAC fits the map from the second frame to the first;
    the result is the mean reprojection distance over the fit's inliers.
    None when fewer than 4 matches survive or no model is found.
    matches_override skips detection and scores the given matches
    (oriented a=frame1, b=frame2) instead, for oracle runs.
    """
    if matches_override is not None:
        fwd = matches_override
    else:
        f1 = pipeline.features(
            encode_window(stream, TemporalWindow(t1, t1 + dt), representation)
        )
        f2 = pipeline.features(
            encode_window(stream, TemporalWindow(t2, t2 + dt), representation)
        )
        fwd = match(f1, f2)

    if planar_mask is not None:
        m1, m2 = (
            planar_mask if isinstance(planar_mask, tuple) else (planar_mask, planar_mask)
        )
        kept = []
        for m in fwd:
            xa, ya = _round_idx(m.a[0]), _round_idx(m.a[1])
            xb, yb = _round_idx(m.b[0]), _round_idx(m.b[1])
            if not (0 <= xa < m1.shape[1] and 0 <= ya < m1.shape[0] and m1[ya, xa]):
                continue
            if not (0 <= xb < m2.shape[1] and 0 <= yb < m2.shape[0] and m2[yb, xb]):
                continue
            kept.append(m)
        fwd = kept

    if len(fwd) < 4:
        return None
    # fit frame2 -> frame1 so reprojection lands at the reference time
    rev = [Match(a=m.b, b=m.a, score=m.score) for m in fwd]
    try:
        h21, inliers = ransac_homography(
            rev, ransac_threshold, ransac_iters,
            rng if rng is not None else np.random.default_rng(0),
        )
    except DegenerateGeometryError:
        return None
    pts1 = np.array([m.a for m in fwd], dtype=np.float64)[inliers]
    pts2 = np.array([m.b for m in fwd], dtype=np.float64)[inliers]
    if len(pts1) == 0:
        return None
    return reprojection_error(h21, pts1, pts2)


def repeatability(
    kp_a,
    kp_b,
    h_ab: np.ndarray | None = None,
    tol: float = 4.0,
) -> float | None:
    """Symmetric fraction of keypoints re-found across two frames.

    Points from the first frame are mapped through h_ab (identity when
    None) and count as repeated when some second-frame point lies within
    tol; the reverse direction uses the inverse map; the two fractions
    are averaged. None when either set is empty.
    """
    pa = np.asarray(kp_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(kp_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) == 0 or len(pb) == 0:
        return None
    if h_ab is None:
        h_ab = np.eye(3)
    pa_in_b = warp_points(h_ab, pa)
    pb_in_a = warp_points(np.linalg.inv(h_ab), pb)

    def frac(src, dst):
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        return float((d2.min(axis=1) <= tol * tol).mean())

    return 0.5 * (frac(pa_in_b, pb) + frac(pb_in_a, pa))
