"""Image front-end tests.

LK tracking is exercised on analytic multi-frequency textures so the
ground-truth sub-pixel shift is exact (the shifted frame is evaluated
from the same closed-form field, not interpolated).
"""

import numpy as np
import pytest

from planevio.frontend import (
    TRACK_DIVERGED,
    TRACK_OK,
    TRACK_OOB,
    FrontendConfig,
    GrayImage,
    build_pyramid,
    harris_detect,
    lk_track_pyramid,
    lk_track_single,
    ransac_filter,
    read_pgm,
    write_pgm,
)
from planevio.geometry import Pixel


def analytic_image(h, w, shift=(0.0, 0.0)):
    """Smooth band-limited texture; `shift` moves content by (du, dv).

    Frequencies stay below ~0.13 rad/px so the coarsest pyramid level
    (8x downsampled) is still well-resolved rather than aliased.
    """
    v, u = np.mgrid[0:h, 0:w].astype(float)
    x = u - shift[0]
    y = v - shift[1]
    f = (0.5
         + 0.14 * np.sin(0.110 * x + 0.4)
         + 0.12 * np.cos(0.090 * y - 1.1)
         + 0.11 * np.sin(0.070 * x + 0.057 * y)
         + 0.08 * np.cos(0.128 * x - 0.077 * y + 0.7))
    return GrayImage(np.clip(f, 0.0, 1.0))


class TestPgm:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(30)
        img = GrayImage.from_bytes(rng.integers(0, 256, size=(48, 64), dtype=np.uint8))
        p1 = tmp_path / "a.pgm"
        p2 = tmp_path / "b.pgm"
        write_pgm(img, p1)
        write_pgm(read_pgm(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P2\n2 2\n255\n")
        with pytest.raises(ValueError):
            read_pgm(p)

    def test_rejects_truncated_body(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(ValueError):
            read_pgm(p)


class TestPyramid:
    def test_four_levels_with_halved_dims(self):
        pyr = build_pyramid(analytic_image(256, 320))
        dims = [(l.height, l.width) for l in pyr.levels]
        assert dims == [(32, 40), (64, 80), (128, 160), (256, 320)]

    def test_odd_dims_floor(self):
        pyr = build_pyramid(analytic_image(250, 250))
        dims = [(l.height, l.width) for l in pyr.levels]
        assert dims == [(31, 31), (62, 62), (125, 125), (250, 250)]

    def test_too_small_raises(self):
        with pytest.raises(ValueError):
            build_pyramid(analytic_image(31, 64))

    def test_box_average_hand_value(self):
        a = np.zeros((64, 64))
        a[0, 0], a[0, 1], a[1, 0], a[1, 1] = 0.1, 0.2, 0.3, 0.4
        pyr = build_pyramid(GrayImage(a))
        assert pyr.levels[2].pixels[0, 0] == pytest.approx(0.25, abs=1e-15)


class TestHarris:
    def square_image(self):
        a = np.full((128, 128), 0.9)
        a[40:80, 50:100] = 0.1   # corners at (50,40) (99,40) (50,79) (99,79)
        return GrayImage(a), [(50, 40), (99, 40), (50, 79), (99, 79)]

    def test_four_square_corners_found(self):
        img, truth = self.square_image()
        corners = harris_detect(img, max_corners=4, min_dist=8.0)
        assert len(corners) == 4
        for tx, ty in truth:
            d = min(np.hypot(c.u - tx, c.v - ty) for c in corners)
            assert d <= 2.0

    def test_constant_image_no_corners(self):
        assert harris_detect(GrayImage(np.full((64, 64), 0.5)), 10, 5.0) == []

    def test_response_invariant_to_intensity_offset(self):
        img, _ = self.square_image()
        shifted = GrayImage(np.clip(img.pixels - 0.05, 0, 1))
        a = harris_detect(img, 4, 8.0)
        b = harris_detect(shifted, 4, 8.0)
        assert {(c.u, c.v) for c in a} == {(c.u, c.v) for c in b}

    def test_min_dist_respected(self):
        rng = np.random.default_rng(31)
        img = GrayImage(np.clip(
            0.5 + 0.4 * np.sin(np.outer(np.arange(128), np.arange(128)) * 0.05)
            + 0.02 * rng.standard_normal((128, 128)), 0, 1))
        corners = harris_detect(img, max_corners=40, min_dist=9.0)
        pts = np.array([[c.u, c.v] for c in corners])
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                assert np.hypot(*(pts[i] - pts[j])) >= 9.0


class TestLkSingle:
    def test_zero_motion_unchanged(self):
        img = analytic_image(96, 96)
        for start in [(30.0, 40.0), (50.5, 47.25), (70.0, 20.0)]:
            r = lk_track_single(img, img, Pixel(*start))
            assert r.status == TRACK_OK
            assert np.hypot(r.point.u - start[0], r.point.v - start[1]) < 0.05
            assert r.residual < 1e-9

    def test_subpixel_translation_recovered(self):
        shift = (3.3, -2.6)
        a = analytic_image(96, 96)
        b = analytic_image(96, 96, shift=shift)
        for start in [(40.0, 40.0), (55.0, 60.0)]:
            r = lk_track_single(a, b, Pixel(*start))
            assert r.status == TRACK_OK
            assert abs(r.point.u - (start[0] + shift[0])) < 0.05
            assert abs(r.point.v - (start[1] + shift[1])) < 0.05

    def test_textureless_diverges(self):
        flat = GrayImage(np.full((64, 64), 0.5))
        r = lk_track_single(flat, flat, Pixel(32.0, 32.0))
        assert r.status == TRACK_DIVERGED

    def test_border_point_out_of_bounds(self):
        img = analytic_image(64, 64)
        r = lk_track_single(img, img, Pixel(3.0, 30.0))
        assert r.status == TRACK_OOB

    def test_initial_guess_used(self):
        # a 9 px shift is outside single-level capture range from the
        # identity start, but converges from a nearby initial guess
        shift = (9.0, 0.0)
        a = analytic_image(96, 96)
        b = analytic_image(96, 96, shift=shift)
        seeded = lk_track_single(a, b, Pixel(40.0, 40.0), init=Pixel(48.0, 40.0))
        assert seeded.status == TRACK_OK
        assert abs(seeded.point.u - 49.0) < 0.05


class TestLkPyramid:
    def test_large_shift_recovered(self):
        # 12 px exceeds the single-level range; the pyramid handles it
        shift = (12.0, 5.0)
        a = build_pyramid(analytic_image(256, 256))
        b = build_pyramid(analytic_image(256, 256, shift=shift))
        rng = np.random.default_rng(32)
        pts = [Pixel(u, v) for u, v in rng.uniform(40, 210, size=(40, 2))]
        results = lk_track_pyramid(a, b, pts)
        good = 0
        for pt, r in zip(pts, results):
            if r.status != TRACK_OK:
                continue
            err = np.hypot(r.point.u - pt.u - shift[0], r.point.v - pt.v - shift[1])
            if err < 0.5:
                good += 1
        assert good >= 0.9 * len(pts)

    def test_zero_motion_ok(self):
        pyr = build_pyramid(analytic_image(128, 128))
        results = lk_track_pyramid(pyr, pyr, [Pixel(64.0, 64.0), Pixel(40.0, 80.0)])
        for pt, r in zip([(64.0, 64.0), (40.0, 80.0)], results):
            assert r.status == TRACK_OK
            assert np.hypot(r.point.u - pt[0], r.point.v - pt[1]) < 0.05

    def test_point_outside_image_flagged(self):
        pyr = build_pyramid(analytic_image(128, 128))
        r = lk_track_pyramid(pyr, pyr, [Pixel(2.0, 2.0)])[0]
        assert r.status == TRACK_OOB

    def test_explicit_inits_respected(self):
        shift = (14.0, 0.0)
        a = build_pyramid(analytic_image(256, 256))
        b = build_pyramid(analytic_image(256, 256, shift=shift))
        pt = Pixel(100.0, 100.0)
        r = lk_track_pyramid(a, b, [pt], inits=[Pixel(113.0, 100.0)])[0]
        assert r.status == TRACK_OK
        assert abs(r.point.u - 114.0) < 0.1


def two_view_correspondences(rng, n, noise=0.0):
    """Project random 3-d points into two synthetic views."""
    from planevio.geometry import CameraIntrinsics, Pose, compose, inverse, project, so3_exp

    intr = CameraIntrinsics(300.0, 300.0, 128.0, 128.0)
    pts = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-3, 3, n), rng.uniform(5, 12, n)])
    pose_b = Pose(so3_exp(np.array([0.01, -0.03, 0.02])), np.array([0.4, 0.05, 0.1]))
    a = np.array([[project(intr, p).u, project(intr, p).v] for p in pts])
    pb = inverse(pose_b).apply(pts)
    b = np.array([[project(intr, p).u, project(intr, p).v] for p in pb])
    if noise:
        a += rng.normal(0, noise, a.shape)
        b += rng.normal(0, noise, b.shape)
    return a, b


class TestRansac:
    def test_exact_pairs_all_inliers(self):
        rng = np.random.default_rng(33)
        a, b = two_view_correspondences(rng, 60)
        res = ransac_filter(a, b, seed=7)
        assert not res.degenerate
        assert res.inlier_mask.all()

    def test_planted_outliers_rejected(self):
        rng = np.random.default_rng(34)
        a, b = two_view_correspondences(rng, 80)
        bad = rng.choice(80, size=8, replace=False)
        b[bad] += rng.uniform(15, 60, size=(8, 2)) * rng.choice([-1, 1], size=(8, 2))
        res = ransac_filter(a, b, seed=7)
        assert not res.inlier_mask[bad].any()
        good = np.setdiff1d(np.arange(80), bad)
        assert res.inlier_mask[good].mean() > 0.95

    def test_fewer_than_eight_degenerate(self):
        rng = np.random.default_rng(35)
        a, b = two_view_correspondences(rng, 5)
        res = ransac_filter(a, b, seed=7)
        assert res.degenerate
        assert res.inlier_mask.all() and len(res.inlier_mask) == 5

    def test_seeded_and_deterministic(self):
        rng = np.random.default_rng(36)
        a, b = two_view_correspondences(rng, 50, noise=0.3)
        m1 = ransac_filter(a, b, seed=11).inlier_mask
        m2 = ransac_filter(a, b, seed=11).inlier_mask
        np.testing.assert_array_equal(m1, m2)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ransac_filter(np.zeros((10, 2)), np.zeros((9, 2)), seed=0)
