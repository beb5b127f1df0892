import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evpoint.geometry import (
    DegenerateGeometryError,
    HomographySampleConfig,
    Match,
    _hartley_normalization,
    _jacobi_eigh,
    compose_about_center,
    dlt_homography,
    normalize_homography,
    ransac_homography,
    reprojection_error,
    sample_homography,
    symmetric_transfer_distances,
    warp_frame,
    warp_point,
    warp_points,
)


def matches_from(h, pts):
    proj = warp_points(h, pts)
    return [Match(a=tuple(p), b=tuple(q)) for p, q in zip(pts, proj)]


def test_match_is_frozen():
    m = Match(a=(1.0, 2.0), b=(3.0, 4.0))
    assert m.score == 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        m.score = 0.5


def test_normalize_homography_scales_last_entry_to_one():
    m = normalize_homography(np.diag([2.0, 2.0, 2.0]))
    assert m[2, 2] == 1.0
    assert np.allclose(m, np.eye(3))


def test_normalize_homography_zero_corner_uses_frobenius():
    m = np.array([[0.0, 0.0, 2.0], [0.0, 2.0, 0.0], [2.0, 0.0, 0.0]])
    out = normalize_homography(m)
    assert out[2, 2] == 0.0
    assert math.isclose(np.linalg.norm(out), 1.0, rel_tol=1e-12)


def test_normalize_homography_rejects_bad_shape():
    with pytest.raises(ValueError):
        normalize_homography(np.eye(2))


def test_normalize_homography_rejects_singular():
    with pytest.raises(DegenerateGeometryError):
        normalize_homography(np.diag([1.0, 0.0, 1.0]))


def test_compose_defaults_to_identity():
    assert np.allclose(compose_about_center(64, 64), np.eye(3))


def test_compose_pure_translation():
    h = compose_about_center(64, 48, dx=3.0, dy=-2.0)
    expected = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, -2.0], [0.0, 0.0, 1.0]])
    assert np.allclose(h, expected)


def test_compose_scale_fixes_center():
    h = compose_about_center(64, 64, scale=2.0)
    cx = cy = 31.5
    assert np.allclose(warp_point(h, (cx, cy)), (cx, cy))
    # a corner moves away from the center by the scale factor
    assert np.allclose(warp_point(h, (0.0, 0.0)), (cx - 2 * cx, cy - 2 * cy))


def test_compose_quarter_turn_about_center():
    h = compose_about_center(64, 64, angle=math.pi / 2)
    cx = cy = 31.5
    # +x offset from the center rotates onto +y
    assert np.allclose(warp_point(h, (cx + 1.0, cy)), (cx, cy + 1.0), atol=1e-12)
    assert np.allclose(warp_point(h, (cx, cy + 1.0)), (cx - 1.0, cy), atol=1e-12)


def test_compose_center_moves_only_by_translation():
    h = compose_about_center(
        64, 48, dx=5.0, dy=-1.0, angle=0.3, scale=1.2, px=0.04, py=-0.02
    )
    center = ((64 - 1) / 2.0, (48 - 1) / 2.0)
    moved = warp_point(h, center)
    assert np.allclose(moved, (center[0] + 5.0, center[1] - 1.0), atol=1e-9)


def test_compose_factors_into_single_effect_maps():
    full = compose_about_center(
        64, 48, dx=2.0, dy=3.0, angle=0.4, scale=0.9, px=0.03, py=0.01
    )
    product = (
        compose_about_center(64, 48, dx=2.0, dy=3.0)
        @ compose_about_center(64, 48, angle=0.4)
        @ compose_about_center(64, 48, scale=0.9)
        @ compose_about_center(64, 48, px=0.03, py=0.01)
    )
    assert np.allclose(full, normalize_homography(product), atol=1e-12)


def test_compose_perspective_depth_at_border():
    h = compose_about_center(64, 64, px=0.05)
    # third row encodes the depth ramp, 2 * px / width per pixel of x,
    # rescaled by the depth at the origin after anchoring at the center
    depth_at_origin = 1.0 - 2 * 0.05 * 31.5 / 64
    assert math.isclose(h[2, 0], (2 * 0.05 / 64) / depth_at_origin, rel_tol=1e-12)
    assert h[2, 1] == 0.0


def test_sample_config_validation():
    with pytest.raises(ValueError):
        HomographySampleConfig(width=0, height=64)
    with pytest.raises(ValueError):
        HomographySampleConfig(width=64, height=64, max_translation=0.5)
    with pytest.raises(ValueError):
        HomographySampleConfig(width=64, height=64, scale_range=(0.05, 1.0))
    with pytest.raises(ValueError):
        HomographySampleConfig(width=64, height=64, scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        HomographySampleConfig(width=64, height=64, max_perspective=0.5)


def test_sample_homography_is_deterministic():
    cfg = HomographySampleConfig(width=64, height=64)
    a = sample_homography(cfg, np.random.default_rng(7))
    b = sample_homography(cfg, np.random.default_rng(7))
    assert (a == b).all()


def test_sample_homography_zero_bounds_yield_identity():
    cfg = HomographySampleConfig(
        width=64,
        height=64,
        max_translation=0.0,
        max_rotation=0.0,
        scale_range=(1.0, 1.0),
        max_perspective=0.0,
    )
    h = sample_homography(cfg, np.random.default_rng(0))
    assert np.allclose(h, np.eye(3))


def test_sample_homography_draw_order():
    cfg = HomographySampleConfig(width=64, height=48)
    h = sample_homography(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(11)
    dx = rng.uniform(-cfg.max_translation, cfg.max_translation) * cfg.width
    dy = rng.uniform(-cfg.max_translation, cfg.max_translation) * cfg.height
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    scale = rng.uniform(*cfg.scale_range)
    px = rng.uniform(-cfg.max_perspective, cfg.max_perspective)
    py = rng.uniform(-cfg.max_perspective, cfg.max_perspective)
    assert np.allclose(
        h, compose_about_center(64, 48, dx, dy, angle, scale, px, py)
    )


def test_warp_points_identity_and_translation():
    pts = np.array([[0.0, 0.0], [10.0, 5.0]])
    assert np.allclose(warp_points(np.eye(3), pts), pts)
    t = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -3.0], [0.0, 0.0, 1.0]])
    assert np.allclose(warp_points(t, pts), pts + [2.0, -3.0])


def test_warp_points_perspective_division():
    h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.01, 0.0, 1.0]])
    out = warp_points(h, np.array([[10.0, 20.0]]))
    assert np.allclose(out, [[10.0 / 1.1, 20.0 / 1.1]])


def test_warp_points_shape_handling():
    single = warp_points(np.eye(3), np.array([3.0, 4.0]))
    assert single.shape == (2,)
    assert warp_point(np.eye(3), (3.0, 4.0)) == (3.0, 4.0)


def test_warp_points_rejects_infinite_image():
    h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-0.1, 0.0, 1.0]])
    with pytest.raises(ValueError):
        warp_points(h, np.array([[10.0, 0.0]]))


def test_warp_frame_identity_is_exact():
    rng = np.random.default_rng(5)
    frame = rng.integers(0, 256, size=(16, 20)).astype(np.uint8)
    out, valid = warp_frame(np.eye(3), frame)
    assert (out == frame).all()
    assert valid.all()
    assert out.dtype == np.uint8


def test_warp_frame_integer_translation_shifts_content():
    rng = np.random.default_rng(6)
    frame = rng.integers(0, 256, size=(12, 12)).astype(np.uint8)
    h = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    out, valid = warp_frame(h, frame, fill=7)
    assert (out[:, 3:] == frame[:, :-3]).all()
    assert (out[:, :3] == 7).all()
    assert not valid[:, :3].any()
    assert valid[:, 3:].all()


def test_warp_frame_float_input_stays_float():
    frame = np.linspace(0.0, 1.0, 12).reshape(3, 4)
    out, _ = warp_frame(np.eye(3), frame)
    assert out.dtype == np.float64
    assert np.allclose(out, frame)


def test_warp_frame_rejects_non_2d():
    with pytest.raises(ValueError):
        warp_frame(np.eye(3), np.zeros((4, 4, 3), dtype=np.uint8))


def test_warp_frame_round_trip_within_two_levels():
    # a linear ramp is reproduced exactly by bilinear sampling, so the
    # only error left after warping forward and back is quantization
    ramp = np.add.outer(np.arange(24) * 4, np.arange(32) * 3)
    frame = np.clip(ramp, 0, 255).astype(np.uint8)
    h = compose_about_center(32, 24, dx=1.3, dy=-0.7, angle=0.12, scale=1.05)
    fwd, v1 = warp_frame(h, frame)
    back, v2 = warp_frame(np.linalg.inv(h), fwd)
    # only judge pixels whose back-warp interpolates purely valid samples
    v1_back = warp_frame(np.linalg.inv(h), v1.astype(np.float64))[0]
    both = v1 & v2 & (v1_back >= 1.0 - 1e-9)
    diff = np.abs(back.astype(int) - frame.astype(int))[both]
    assert both.sum() > 200
    assert diff.max() <= 2


def test_jacobi_matches_numpy_on_random_symmetric():
    rng = np.random.default_rng(17)
    for n in (2, 5, 9):
        m = rng.normal(size=(n, n))
        s = m + m.T
        evals, evecs = _jacobi_eigh(s)
        order = np.argsort(evals)
        assert np.allclose(np.sort(evals), np.linalg.eigvalsh(s), atol=1e-9)
        assert np.allclose(evecs.T @ evecs, np.eye(n), atol=1e-12)
        assert np.allclose(s @ evecs, evecs @ np.diag(evals), atol=1e-9)
        del order


def test_jacobi_resolves_tiny_eigenvalue_of_large_matrix():
    # one near-zero eigenvalue among large ones: the convergence test must
    # not be fooled by cancellation when the Frobenius norm is ~1e2
    rng = np.random.default_rng(23)
    m = rng.normal(size=(9, 9))
    q, _ = np.linalg.qr(m)
    target = np.array([1e-13, 8.0, 8.2, 19.0, 21.0, 29.0, 55.0, 86.0, 160.0])
    s = q @ np.diag(target) @ q.T
    s = (s + s.T) / 2
    evals, evecs = _jacobi_eigh(s)
    got = evecs[:, np.argmin(evals)]
    want = q[:, 0]
    if got @ want < 0:
        want = -want
    assert np.abs(got - want).max() < 1e-10


def test_hartley_normalization_centers_and_scales():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 100, size=(30, 2))
    t = _hartley_normalization(pts)
    mapped = warp_points(t, pts)
    assert np.allclose(mapped.mean(axis=0), 0.0, atol=1e-9)
    mean_norm = np.sqrt((mapped**2).sum(axis=1)).mean()
    assert math.isclose(mean_norm, math.sqrt(2.0), rel_tol=1e-12)


def test_hartley_normalization_rejects_coincident_points():
    pts = np.full((5, 2), 3.0)
    with pytest.raises(DegenerateGeometryError):
        _hartley_normalization(pts)


def test_dlt_recovers_known_homography():
    rng = np.random.default_rng(1)
    h = compose_about_center(64, 64, dx=4.0, dy=-2.0, angle=0.2, scale=1.1, px=0.03)
    pts = rng.uniform(0, 63, size=(8, 2))
    est = dlt_homography(matches_from(h, pts))
    assert np.abs(est - h).max() < 1e-9


def test_dlt_exact_with_minimum_points():
    h = compose_about_center(64, 64, dx=1.0, angle=-0.3, scale=0.9)
    pts = np.array([[5.0, 5.0], [50.0, 8.0], [12.0, 55.0], [58.0, 49.0]])
    est = dlt_homography(matches_from(h, pts))
    assert np.abs(est - h).max() < 1e-9


def test_dlt_requires_four_matches():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateGeometryError):
        dlt_homography(matches_from(np.eye(3), pts))


def test_dlt_rejects_collinear_points():
    pts = np.stack([np.linspace(0, 50, 6), np.linspace(0, 25, 6)], axis=1)
    with pytest.raises(DegenerateGeometryError):
        dlt_homography(matches_from(np.eye(3), pts))


def test_dlt_equivariant_under_shifting_both_frames():
    rng = np.random.default_rng(9)
    h = compose_about_center(64, 64, dx=2.0, angle=0.15, scale=1.05)
    pts = rng.uniform(5, 58, size=(10, 2))
    shift = np.array([[1.0, 0.0, 100.0], [0.0, 1.0, -40.0], [0.0, 0.0, 1.0]])
    moved = [
        Match(a=warp_point(shift, m.a), b=warp_point(shift, m.b))
        for m in matches_from(h, pts)
    ]
    est = dlt_homography(moved)
    expected = normalize_homography(shift @ h @ np.linalg.inv(shift))
    assert np.abs(est - expected).max() < 1e-9


def test_symmetric_transfer_distance_hand_values():
    scale2 = np.diag([2.0, 2.0, 1.0])
    d = symmetric_transfer_distances(scale2, [Match(a=(1.0, 0.0), b=(4.0, 0.0))])
    # forward |2 - 4| = 2, backward |2 - 1| = 1
    assert np.allclose(d, [3.0])
    d = symmetric_transfer_distances(np.eye(3), [Match(a=(0.0, 0.0), b=(3.0, 4.0))])
    assert np.allclose(d, [10.0])


def test_symmetric_transfer_scores_points_sent_to_infinity_as_inf():
    # invertible, but maps any point with x = 2 to the line at infinity
    h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, -2.0]])
    matches = [Match(a=(2.0, 3.0), b=(1.0, 1.0)), Match(a=(4.0, 1.0), b=(2.0, 0.5))]
    d = symmetric_transfer_distances(h, matches)
    assert np.isinf(d[0])
    assert np.isfinite(d[1])


def test_ransac_survives_degenerate_hypotheses():
    # a cloud dominated by near-collinear points makes many 4-point draws
    # produce ill-conditioned homographies; scoring them must not raise
    rng = np.random.default_rng(3)
    h = compose_about_center(64, 64, dx=2.0, dy=-1.0)
    line = np.stack([np.linspace(1, 60, 30), np.linspace(1, 60, 30)], axis=1)
    spread = rng.uniform(0, 63, size=(10, 2))
    pts = np.vstack([line, spread])
    matches = [Match(a=tuple(p), b=tuple(q))
               for p, q in zip(pts, warp_points(h, pts))]
    est, flags = ransac_homography(matches, rng=np.random.default_rng(1))
    assert flags.sum() >= 10
    err = reprojection_error(est, warp_points(h, pts), pts)
    assert err < 1e-6


def test_ransac_recovers_under_half_outliers():
    rng = np.random.default_rng(2)
    h = compose_about_center(64, 64, dx=3.0, dy=1.0, angle=0.1, scale=1.08)
    pts = rng.uniform(0, 63, size=(60, 2))
    proj = warp_points(h, pts)
    bad = rng.choice(60, size=30, replace=False)
    proj[bad] = rng.uniform(0, 63, size=(30, 2))
    matches = [Match(a=tuple(p), b=tuple(q)) for p, q in zip(pts, proj)]
    est, flags = ransac_homography(matches, rng=np.random.default_rng(0))
    clean = np.ones(60, dtype=bool)
    clean[bad] = False
    assert (flags & ~clean).sum() == 0
    err = reprojection_error(est, warp_points(h, pts[clean]), pts[clean])
    assert err < 1e-6


def test_ransac_is_deterministic_for_a_seed():
    rng = np.random.default_rng(4)
    h = compose_about_center(64, 64, dx=-2.0, angle=0.2)
    pts = rng.uniform(0, 63, size=(40, 2))
    proj = warp_points(h, pts)
    proj[:10] += rng.normal(0, 8, size=(10, 2))
    matches = [Match(a=tuple(p), b=tuple(q)) for p, q in zip(pts, proj)]
    h1, f1 = ransac_homography(matches, rng=np.random.default_rng(42))
    h2, f2 = ransac_homography(matches, rng=np.random.default_rng(42))
    assert (h1 == h2).all()
    assert (f1 == f2).all()


def test_ransac_requires_four_matches():
    with pytest.raises(DegenerateGeometryError):
        ransac_homography([Match(a=(0.0, 0.0), b=(0.0, 0.0))] * 3)


def test_ransac_fails_on_degenerate_cloud():
    pts = np.stack([np.linspace(0, 50, 12), np.linspace(0, 50, 12)], axis=1)
    matches = [Match(a=tuple(p), b=tuple(p)) for p in pts]
    with pytest.raises(DegenerateGeometryError):
        ransac_homography(matches, rng=np.random.default_rng(0))


def test_reprojection_error_hand_value():
    ref = np.array([[0.0, 0.0], [0.0, 3.0]])
    mov = np.array([[3.0, 4.0], [0.0, 7.0]])
    assert reprojection_error(np.eye(3), ref, mov) == pytest.approx(4.5)


def test_reprojection_error_rejects_mismatched_inputs():
    with pytest.raises(ValueError):
        reprojection_error(np.eye(3), np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        reprojection_error(np.eye(3), np.zeros((0, 2)), np.zeros((0, 2)))


@given(
    dx=st.floats(-8.0, 8.0),
    dy=st.floats(-8.0, 8.0),
    angle=st.floats(-0.25, 0.25),
    scale=st.floats(0.85, 1.15),
    px=st.floats(-0.05, 0.05),
    py=st.floats(-0.05, 0.05),
    x=st.floats(2.0, 61.0),
    y=st.floats(2.0, 61.0),
)
@settings(max_examples=200, deadline=None)
def test_warp_inverse_round_trip(dx, dy, angle, scale, px, py, x, y):
    h = compose_about_center(64, 64, dx, dy, angle, scale, px, py)
    fwd = warp_points(h, np.array([[x, y]]))
    back = warp_points(np.linalg.inv(h), fwd)
    assert np.abs(back - [[x, y]]).max() <= 1e-9


@given(seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_dlt_round_trip_on_sampled_homographies(seed):
    rng = np.random.default_rng(seed)
    cfg = HomographySampleConfig(width=64, height=64)
    h = sample_homography(cfg, rng)
    pts = rng.uniform(0, 63, size=(12, 2))
    est = dlt_homography(matches_from(h, pts))
    assert np.abs(est - h).max() < 1e-6
