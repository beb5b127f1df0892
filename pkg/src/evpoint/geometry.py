"""Planar homography tools: sampling, warping, estimation, scoring.

Homographies are plain 3x3 float64 arrays normalized so m[2][2] = 1
(unit Frobenius norm if that entry vanishes). Estimation uses the
normalized direct linear transform with a cyclic Jacobi eigensolver, so
no linear-algebra package beyond numpy arithmetic is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a homography."""


@dataclass(frozen=True)
class Match:
    """A putative correspondence between two frames."""

    a: tuple[float, float]
    b: tuple[float, float]
    score: float = 1.0


@dataclass(frozen=True)
class HomographySampleConfig:
    """Bounds for random homography sampling, anchored at the frame center.

    max_translation is a fraction of the frame size per axis,
    max_rotation is in radians, and max_perspective bounds the relative
    depth change across the frame. Zero bounds with a unit scale range
    make sampling return the identity.
    """

    width: int
    height: int
    max_translation: float = 0.125
    max_rotation: float = 0.25
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_perspective: float = 0.05

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame size must be positive")
        if not 0.0 <= self.max_translation <= 0.45:
            raise ValueError("max_translation out of range")
        lo, hi = self.scale_range
        if not 0.1 <= lo <= hi:
            raise ValueError("bad scale range")
        if self.max_perspective < 0 or self.max_perspective > 0.4:
            raise ValueError("max_perspective out of range")


def normalize_homography(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    if abs(m[2, 2]) > 1e-12:
        m = m / m[2, 2]
    else:
        m = m / np.linalg.norm(m)
    if abs(np.linalg.det(m)) <= 1e-12:
        raise DegenerateGeometryError("homography is not invertible")
    return m


def compose_about_center(
    width: int,
    height: int,
    dx: float = 0.0,
    dy: float = 0.0,
    angle: float = 0.0,
    scale: float = 1.0,
    px: float = 0.0,
    py: float = 0.0,
) -> np.ndarray:
    """Translation * rotation * scale * perspective, about the frame center.

    px and py are normalized perspective terms: a point at the frame
    border changes homogeneous depth by at most that fraction.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    scl = np.diag([scale, scale, 1.0])
    per = np.array(
        [[1.0, 0.0, 0.0],
         [0.0, 1.0, 0.0],
         [2.0 * px / width, 2.0 * py / height, 1.0]]
    )
    tra = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    m = from_center @ tra @ rot @ scl @ per @ to_center
    return normalize_homography(m)


def sample_homography(
    cfg: HomographySampleConfig, rng: np.random.Generator
) -> np.ndarray:
    """Draw a random homography within the configured bounds.

    Six uniform draws in a fixed order (dx, dy, angle, scale, px, py),
    so the result is reproducible from the generator state.
    """
    dx = rng.uniform(-cfg.max_translation, cfg.max_translation) * cfg.width
    dy = rng.uniform(-cfg.max_translation, cfg.max_translation) * cfg.height
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    px = rng.uniform(-cfg.max_perspective, cfg.max_perspective)
    py = rng.uniform(-cfg.max_perspective, cfg.max_perspective)
    return compose_about_center(cfg.width, cfg.height, dx, dy, angle, scale, px, py)


def warp_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a homography to an (N, 2) array of (x, y) points."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
    if np.any(np.abs(w) <= 1e-12):
        raise ValueError("point maps to infinity under this homography")
    x = (h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]) / w
    y = (h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]) / w
    out = np.stack([x, y], axis=1)
    return out[0] if single else out


def warp_point(h: np.ndarray, p: tuple[float, float]) -> tuple[float, float]:
    out = warp_points(h, np.asarray(p, dtype=np.float64))
    return float(out[0]), float(out[1])


def warp_frame(
    h: np.ndarray, frame: np.ndarray, fill: float = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a single-channel frame so content moves forward under h.

    Each output pixel is sampled bilinearly from the source at the
    inverse-mapped location; pixels whose source falls outside the frame
    take the fill value and are marked invalid in the returned mask.
    uint8 input yields a rounded uint8 frame, anything else float64.
    """
    if frame.ndim != 2:
        raise ValueError("expected an (H, W) frame")
    hh, ww = frame.shape
    inv = np.linalg.inv(normalize_homography(h))
    ys, xs = np.mgrid[0:hh, 0:ww]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    w = inv[2, 0] * pts[:, 0] + inv[2, 1] * pts[:, 1] + inv[2, 2]
    w = np.where(np.abs(w) <= 1e-12, np.inf, w)
    sx = (inv[0, 0] * pts[:, 0] + inv[0, 1] * pts[:, 1] + inv[0, 2]) / w
    sy = (inv[1, 0] * pts[:, 0] + inv[1, 1] * pts[:, 1] + inv[1, 2]) / w
    valid = (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)

    sxc = np.clip(sx, 0, ww - 1)
    syc = np.clip(sy, 0, hh - 1)
    x0 = np.clip(np.floor(sxc).astype(np.int64), 0, ww - 2) if ww > 1 else np.zeros_like(sxc, dtype=np.int64)
    y0 = np.clip(np.floor(syc).astype(np.int64), 0, hh - 2) if hh > 1 else np.zeros_like(syc, dtype=np.int64)
    fx = sxc - x0
    fy = syc - y0
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    src = frame.astype(np.float64)
    val = (
        src[y0, x0] * (1 - fx) * (1 - fy)
        + src[y0, x1] * fx * (1 - fy)
        + src[y1, x0] * (1 - fx) * fy
        + src[y1, x1] * fx * fy
    )
    val = np.where(valid, val, float(fill))
    out = val.reshape(hh, ww)
    if frame.dtype == np.uint8:
        out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out, valid.reshape(hh, ww)


def _jacobi_eigh(s: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi.

    Returns (eigenvalues, eigenvectors as columns), unsorted. Sweeps stop
    once the off-diagonal Frobenius norm drops below tol.
    """
    a = np.array(s, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        # Summing squared off-diagonal entries directly avoids the
        # catastrophic cancellation of a full-norm-minus-diagonal form,
        # which can report convergence while residuals remain.
        off = math.sqrt(((a - np.diag(np.diag(a))) ** 2).sum())
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking the points to centroid 0, mean norm sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if d <= 1e-12:
        raise DegenerateGeometryError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _match_arrays(matches) -> tuple[np.ndarray, np.ndarray]:
    pa = np.array([m.a for m in matches], dtype=np.float64)
    pb = np.array([m.b for m in matches], dtype=np.float64)
    return pa, pb


def dlt_homography(matches) -> np.ndarray:
    """Estimate the homography mapping each match's a-point to its b-point.

    Normalized DLT: both point sets are Hartley-normalized, the 2N x 9
    system's normal matrix is diagonalized by cyclic Jacobi, and the
    eigenvector of the smallest eigenvalue is de-normalized. A second
    near-zero eigenvalue means the points do not pin down a unique
    solution (fewer than 4 in general position).
    """
    matches = list(matches)
    if len(matches) < 4:
        raise DegenerateGeometryError("need at least 4 correspondences")
    pa, pb = _match_arrays(matches)
    ta = _hartley_normalization(pa)
    tb = _hartley_normalization(pb)
    na = (ta @ np.column_stack([pa, np.ones(len(pa))]).T).T
    nb = (tb @ np.column_stack([pb, np.ones(len(pb))]).T).T

    n = len(matches)
    a = np.zeros((2 * n, 9))
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v

    evals, evecs = _jacobi_eigh(a.T @ a)
    order = np.argsort(evals)
    scale = max(evals[order[-1]], 1.0)
    if evals[order[1]] < 1e-10 * scale:
        raise DegenerateGeometryError("degenerate point configuration")
    h_norm = evecs[:, order[0]].reshape(3, 3)
    return normalize_homography(np.linalg.inv(tb) @ h_norm @ ta)


def symmetric_transfer_distances(h: np.ndarray, matches) -> np.ndarray:
    """Forward plus backward transfer distance per match, in pixels.

    Points the model maps to (or from) infinity score as inf, so a
    degenerate hypothesis counts them as outliers instead of raising.
    """
    pa, pb = _match_arrays(matches)
    hinv = np.linalg.inv(h)

    def transfer(m, src, dst):
        w = m[2, 0] * src[:, 0] + m[2, 1] * src[:, 1] + m[2, 2]
        safe = np.abs(w) > 1e-12
        x = (m[0, 0] * src[:, 0] + m[0, 1] * src[:, 1] + m[0, 2])
        y = (m[1, 0] * src[:, 0] + m[1, 1] * src[:, 1] + m[1, 2])
        d = np.full(len(src), np.inf)
        ws = w[safe]
        d[safe] = np.sqrt(
            (x[safe] / ws - dst[safe, 0]) ** 2
            + (y[safe] / ws - dst[safe, 1]) ** 2
        )
        return d

    return transfer(h, pa, pb) + transfer(hinv, pb, pa)


def ransac_homography(
    matches,
    inlier_threshold: float = 2.0,
    max_iters: int = 2000,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """4-point RANSAC with a final DLT refit on the winning inliers.

    A match is an inlier when its symmetric transfer distance is below
    inlier_threshold. Iterations stop early once the standard 0.999
    confidence bound for the observed inlier ratio is met. Returns the
    refit homography and a boolean inlier array against it.
    """
    matches = list(matches)
    n = len(matches)
    if n < 4:
        raise DegenerateGeometryError("need at least 4 matches")
    if rng is None:
        rng = np.random.default_rng(0)

    best_count = 0
    best_flags = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography([matches[i] for i in idx])
        except DegenerateGeometryError:
            continue
        d = symmetric_transfer_distances(h, matches)
        flags = d < inlier_threshold
        count = int(flags.sum())
        if count > best_count:
            best_count = count
            best_flags = flags
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = math.log1p(-min(ratio**4, 1 - 1e-12))
            needed = min(max_iters, math.ceil(math.log(1e-3) / denom))
    if best_flags is None or best_count < 4:
        raise DegenerateGeometryError("no model with at least 4 inliers")

    kept = [m for m, f in zip(matches, best_flags) if f]
    refit = dlt_homography(kept)
    final_flags = symmetric_transfer_distances(refit, matches) < inlier_threshold
    if int(final_flags.sum()) < 4:
        final_flags = best_flags
    return refit, final_flags


def reprojection_error(
    h: np.ndarray, ref_points: np.ndarray, moved_points: np.ndarray
) -> float:
    """Mean distance between ref points and moved points mapped through h."""
    ref = np.atleast_2d(np.asarray(ref_points, dtype=np.float64))
    mov = np.atleast_2d(np.asarray(moved_points, dtype=np.float64))
    if ref.shape != mov.shape or ref.size == 0:
        raise ValueError("point lists must be nonempty and equal length")
    proj = warp_points(h, mov)
    return float(np.sqrt(((proj - ref) ** 2).sum(axis=1)).mean())
