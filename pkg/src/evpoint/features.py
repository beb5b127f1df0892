"""Inference-time post-processing: keypoints, descriptors, matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Match
from .network import (
    DESC_DIM,
    WeightSet,
    detector_heatmap,
    forward_frame,
    interpolation_matrix,
    pixel_to_cell,
)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass
class FeatureSet:
    """Parallel keypoint and descriptor arrays from one frame."""

    points: np.ndarray       # (N, 2) float64, (x, y)
    scores: np.ndarray       # (N,) float64
    descriptors: np.ndarray  # (N, DESC_DIM) float32, unit rows
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (len(self.points) == len(self.scores) == len(self.descriptors)):
            raise ValueError("points, scores, descriptors must align")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def keypoints(self) -> list[Keypoint]:
        return [
            Keypoint(float(x), float(y), float(s))
            for (x, y), s in zip(self.points, self.scores)
        ]


def extract_keypoints(
    heatmap: np.ndarray,
    tau_test: float = 0.015,
    nms_radius: float = 4.0,
    max_count: int | None = None,
) -> list[Keypoint]:
    """Thresholded, non-maximum-suppressed peaks of a probability map.

    Pixels with probability strictly above tau_test are candidates,
    visited in descending score (ties in row-major order); a candidate
    is kept if no already-kept point lies strictly closer than
    nms_radius (0 disables suppression). The kept list is cut to
    max_count, which keeps the highest scores because of the visit order.
    """
    ys, xs = np.nonzero(heatmap > tau_test)
    if ys.size == 0:
        return []
    scores = heatmap[ys, xs].astype(np.float64)
    order = np.argsort(-scores, kind="stable")
    xs, ys, scores = xs[order], ys[order], scores[order]

    if nms_radius <= 0:
        kept = slice(None) if max_count is None else slice(0, max_count)
        return [
            Keypoint(float(x), float(y), float(s))
            for x, y, s in zip(xs[kept], ys[kept], scores[kept])
        ]

    r2 = nms_radius * nms_radius
    kept_x = np.empty(xs.size)
    kept_y = np.empty(xs.size)
    kept_s = np.empty(xs.size)
    n_kept = 0
    limit = xs.size if max_count is None else min(max_count, xs.size)
    for x, y, s in zip(xs, ys, scores):
        if n_kept:
            d2 = (kept_x[:n_kept] - x) ** 2 + (kept_y[:n_kept] - y) ** 2
            if (d2 < r2).any():
                continue
        kept_x[n_kept] = x
        kept_y[n_kept] = y
        kept_s[n_kept] = s
        n_kept += 1
        if n_kept >= limit:
            break
    return [
        Keypoint(float(kept_x[i]), float(kept_y[i]), float(kept_s[i]))
        for i in range(n_kept)
    ]


def keypoint_array(keypoints) -> tuple[np.ndarray, np.ndarray]:
    """Split a keypoint list into (N, 2) positions and (N,) scores."""
    if not keypoints:
        return np.zeros((0, 2)), np.zeros(0)
    pts = np.array([(k.x, k.y) for k in keypoints], dtype=np.float64)
    scores = np.array([k.score for k in keypoints], dtype=np.float64)
    return pts, scores


def sample_descriptors(desc_raw: np.ndarray, keypoints) -> np.ndarray:
    """Bicubic-sample raw cell descriptors at keypoint positions.

    Matches the dense upsampling exactly: cell centers sit at pixel
    8 i + 3.5, borders clamp, and each sampled vector is L2-normalized.
    Returns (N, DESC_DIM) float32.
    """
    if isinstance(keypoints, np.ndarray):
        pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    else:
        pts, _ = keypoint_array(keypoints)
    if len(pts) == 0:
        return np.zeros((0, desc_raw.shape[0]), dtype=np.float32)
    _, hc, wc = desc_raw.shape
    my = interpolation_matrix(pixel_to_cell(pts[:, 1]), hc)  # (N, Hc)
    mx = interpolation_matrix(pixel_to_cell(pts[:, 0]), wc)  # (N, Wc)
    d = desc_raw.astype(np.float32)
    out = np.einsum("nk,ckl,nl->nc", my, d, mx, optimize=True)
    norms = np.sqrt((out * out).sum(axis=1, keepdims=True))
    return (out / np.maximum(norms, 1e-12)).astype(np.float32)


def match(
    fa: FeatureSet,
    fb: FeatureSet,
    mode: str = "mutual_nn",
    ratio: float | None = None,
) -> list[Match]:
    """Nearest-neighbor descriptor matching by dot product.

    mode "nn" keeps each query's best target; "mutual_nn" additionally
    requires the target's best query to be that query. The optional
    Lowe ratio test compares (1 - dot) distances of the best and second
    best targets. Ties resolve to the lowest index.
    """
    if mode not in ("nn", "mutual_nn"):
        raise ValueError("mode must be 'nn' or 'mutual_nn'")
    if len(fa) == 0 or len(fb) == 0:
        return []
    sims = fa.descriptors.astype(np.float64) @ fb.descriptors.astype(np.float64).T
    best_b = sims.argmax(axis=1)
    keep = np.ones(len(fa), dtype=bool)

    if ratio is not None and sims.shape[1] >= 2:
        part = np.partition(sims, -2, axis=1)
        d1 = 1.0 - part[:, -1]
        d2 = 1.0 - part[:, -2]
        keep &= d1 < ratio * d2
    if mode == "mutual_nn":
        best_a = sims.argmax(axis=0)
        keep &= best_a[best_b] == np.arange(len(fa))

    out = []
    for i in np.nonzero(keep)[0]:
        j = best_b[i]
        out.append(
            Match(
                a=(float(fa.points[i, 0]), float(fa.points[i, 1])),
                b=(float(fb.points[j, 0]), float(fb.points[j, 1])),
                score=float(sims[i, j]),
            )
        )
    return out


@dataclass
class FeaturePipeline:
    """Weights plus extraction settings, bundled for evaluation runs."""

    weights: WeightSet
    tau_test: float = 0.015
    nms_radius: float = 4.0
    max_count: int | None = None

    def features(self, frame: np.ndarray) -> FeatureSet:
        semi, desc_raw = forward_frame(self.weights, frame)
        heat = detector_heatmap(semi)
        kps = extract_keypoints(heat, self.tau_test, self.nms_radius,
                                self.max_count)
        pts, scores = keypoint_array(kps)
        desc = sample_descriptors(desc_raw, pts)
        return FeatureSet(pts, scores, desc, frame.shape[1], frame.shape[0])
