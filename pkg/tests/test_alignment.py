import numpy as np
import pytest

from conftest import (band_image, capture_from_scene, make_pairs, project, random_projective,
                      synthetic_scene)
from ludvision import alignment as A
from ludvision.alignment import Homography, RansacConfig
from ludvision.errors import BoundsError, DegenerateError
from ludvision.raster import DEFAULT_BANDS, Rect

G = DEFAULT_BANDS[1]


class TestCorrespondences:
    def test_self_match(self, scene):
        band = band_image(scene.render(200, 160), G)
        pairs = A.find_correspondences(band, band, grid_step=32, min_candidates=4)
        assert len(pairs) >= 4
        for p in pairs:
            assert p.tgt_xy == p.ref_xy
            assert p.score == pytest.approx(1.0, abs=1e-9)

    def test_integer_shift(self, scene):
        ref = band_image(scene.render(200, 160), G)
        tgt = band_image(scene.render(200, 160, dx=3, dy=-2, gain=0.5, offset=0.3), G)
        pairs = A.find_correspondences(ref, tgt, grid_step=32, min_candidates=4)
        for p in pairs:
            assert p.tgt_xy[0] - p.ref_xy[0] == 3
            assert p.tgt_xy[1] - p.ref_xy[1] == -2

    def test_subpixel_shift_is_close(self, scene):
        ref = band_image(scene.render(200, 160), G)
        tgt = band_image(scene.render(200, 160, dx=2.4, dy=-1.7), G)
        pairs = A.find_correspondences(ref, tgt, grid_step=32, min_candidates=4)
        d = np.array([np.subtract(p.tgt_xy, p.ref_xy) for p in pairs])
        np.testing.assert_allclose(d.mean(axis=0), [2.4, -1.7], atol=0.15)

    def test_constant_bands(self):
        flat = band_image(np.full((160, 200), 0.4), G)
        with pytest.raises(DegenerateError):
            A.find_correspondences(flat, flat, grid_step=32)

    def test_ncc_bounds(self, scene):
        rng = np.random.default_rng(0)
        tpl = rng.random((7, 7))
        region = rng.random((15, 15))
        surf = A.ncc_surface(tpl, region)
        finite = surf[np.isfinite(surf)]
        assert np.all(finite <= 1 + 1e-12) and np.all(finite >= -1 - 1e-12)
        # brute force at one placement
        w = region[3:10, 5:12]
        a, b = tpl - tpl.mean(), w - w.mean()
        assert surf[3, 5] == pytest.approx((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


class TestEstimateHomography:
    def test_identity(self):
        pts = np.array([[0, 0], [100, 0], [0, 80], [100, 80], [50, 40], [20, 70], [90, 10], [33, 66]], float)
        h = A.estimate_homography(make_pairs(pts, pts), RansacConfig(min_inliers=4))
        np.testing.assert_allclose(h.m, np.eye(3), atol=1e-9)

    def test_translation(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 500, (20, 2))
        h = A.estimate_homography(make_pairs(pts, pts + [5, 3]), RansacConfig(min_inliers=4))
        np.testing.assert_allclose(h.m, [[1, 0, 5], [0, 1, 3], [0, 0, 1]], atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_exact_on_minimal_noiseless_sets(self, seed):
        rng = np.random.default_rng(seed)
        m = random_projective(rng)
        m /= m[2, 2]
        for n in (4, 7, 25):
            src = rng.uniform([0, 0], [1600, 1300], (n, 2))
            h = A.estimate_homography(make_pairs(src, project(m, src)), RansacConfig(min_inliers=4))
            np.testing.assert_allclose(h.m, m, rtol=1e-6, atol=1e-9)

    def test_outliers(self):
        h_true, tgt, ref, ref_true, inlier = synthetic_scene(0)
        h = A.estimate_homography(make_pairs(tgt, ref))
        err = np.sqrt(((h.apply(tgt[inlier]) - ref_true[inlier]) ** 2).sum(axis=1))
        assert err.max() < 0.5

    def test_deterministic(self):
        _, tgt, ref, _, _ = synthetic_scene(3)
        a = A.estimate_homography(make_pairs(tgt, ref), RansacConfig(seed=11))
        b = A.estimate_homography(make_pairs(tgt, ref), RansacConfig(seed=11))
        assert a.m.tobytes() == b.m.tobytes()

    def test_collinear(self):
        pts = np.stack([np.linspace(0, 100, 20), np.linspace(0, 50, 20)], axis=1)
        with pytest.raises(DegenerateError):
            A.estimate_homography(make_pairs(pts, pts), RansacConfig(min_inliers=4))

    def test_too_few_pairs(self):
        pts = np.array([[0, 0], [1, 0], [0, 1]], float)
        with pytest.raises(DegenerateError):
            A.estimate_homography(make_pairs(pts, pts))

    def test_consensus_too_small(self):
        rng = np.random.default_rng(4)
        src = rng.uniform(0, 100, (30, 2))
        dst = rng.uniform(0, 100, (30, 2))
        with pytest.raises(DegenerateError):
            A.estimate_homography(make_pairs(src, dst), RansacConfig(min_inliers=12, max_iters=200))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RansacConfig(min_inliers=3)
        with pytest.raises(ValueError):
            RansacConfig(max_iters=0)


class TestWarp:
    def test_identity_copy(self, scene):
        plane = scene.render(40, 30)
        assert np.array_equal(A.warp_band(plane, Homography.identity(), (40, 30)), plane)

    def test_integer_translation(self, scene):
        plane = scene.render(40, 30)
        out = A.warp_band(plane, Homography.translation(3, -2), (40, 30))
        expected = np.zeros_like(plane)
        expected[0:28, 3:40] = plane[2:30, 0:37]
        assert np.array_equal(out, expected)

    def test_single_band_image_in_out(self, scene):
        img = band_image(scene.render(20, 10), G)
        out = A.warp_band(img, Homography.identity(), (20, 10))
        assert out == img

    def test_round_trip(self):
        ys, xs = np.mgrid[0:120, 0:160].astype(float)
        plane = 0.5 + 0.4 * np.sin(xs / 40.0) * np.cos(ys / 35.0)
        h = Homography(random_projective(np.random.default_rng(5)))
        back = A.warp_band(A.warp_band(plane, h, (160, 120)), h.inverse(), (160, 120))
        interior = np.s_[25:-25, 25:-25]
        assert np.abs(back - plane)[interior].max() < 1e-3 * np.ptp(plane)

    def test_composition(self):
        ys, xs = np.mgrid[0:120, 0:160].astype(float)
        plane = 0.5 + 0.4 * np.sin(xs / 40.0 + ys / 50.0)
        rng = np.random.default_rng(6)
        h1, h2 = Homography(random_projective(rng)), Homography(random_projective(rng))
        twice = A.warp_band(A.warp_band(plane, h1, (160, 120)), h2, (160, 120))
        once = A.warp_band(plane, h2 @ h1, (160, 120))
        interior = np.s_[40:-40, 40:-40]
        assert np.abs(twice - once)[interior].max() < 1e-3 * np.ptp(plane)

    def test_output_size(self, scene):
        out = A.warp_band(scene.render(30, 20), Homography.identity(), (17, 9))
        assert out.shape == (9, 17)


class TestAlignAndStack:
    def test_identical_bands(self, scene):
        plane = scene.render(220, 180)
        bands = [band_image(plane, m) for m in DEFAULT_BANDS]
        trim = Rect(10, 10, 200, 160)
        cfg = RansacConfig(min_inliers=6)
        homs = A.register_bands(bands, 1, cfg, grid_step=32)
        for h in homs:
            np.testing.assert_allclose(h.m, np.eye(3), atol=1e-9)
        out = A.align_and_stack(bands, 1, cfg, trim, grid_step=32)
        assert [b.name for b in out.bands] == ["B", "G", "R", "RE", "NIR"]
        expected = np.stack([plane.astype(np.float32)] * 5)[:, 10:170, 10:210]
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_shifted_bands(self, scene):
        shifts = [(6.3, -4.1), (0, 0), (-8.7, 2.2), (9.4, 7.5), (-3.2, -9.8)]
        bands, truth = capture_from_scene(scene, 320, 260, shifts)
        trim = Rect(20, 20, 280, 220)
        out = A.align_and_stack(bands, 1, RansacConfig(min_inliers=8), trim, grid_step=40)
        expected = truth[:, 20:240, 20:300]
        err = np.abs(out.data - expected)[:, 12:-12, 12:-12]
        assert err.mean() < 0.02 * np.ptp(expected)

    def test_band_order_is_by_wavelength(self, scene):
        plane = scene.render(220, 180)
        metas = [DEFAULT_BANDS[i] for i in (4, 2, 0, 3, 1)]
        bands = [band_image(plane, m) for m in metas]
        out = A.align_and_stack(bands, 4, RansacConfig(min_inliers=6), Rect(0, 0, 220, 180), grid_step=32)
        assert [b.name for b in out.bands] == ["B", "G", "R", "RE", "NIR"]

    def test_bad_ref_index(self, scene):
        bands = [band_image(scene.render(64, 64), m) for m in DEFAULT_BANDS]
        with pytest.raises(BoundsError):
            A.align_and_stack(bands, 7)

    def test_failure_names_band(self, scene):
        bands = [band_image(scene.render(220, 180), m) for m in DEFAULT_BANDS]
        bands[3] = band_image(np.full((180, 220), 0.5), DEFAULT_BANDS[3])
        with pytest.raises(DegenerateError, match="RE") as info:
            A.align_and_stack(bands, 1, RansacConfig(min_inliers=6), Rect(0, 0, 220, 180), grid_step=32)
        assert info.value.band == 3

    def test_parallel_equals_sequential(self, scene):
        shifts = [(2.5, -1.5), (0, 0), (-3.1, 2.2), (1.4, 3.3), (-2.2, -2.8)]
        bands, _ = capture_from_scene(scene, 240, 200, shifts)
        kw = dict(cfg=RansacConfig(min_inliers=6, seed=5), trim=Rect(0, 0, 240, 200), grid_step=32)
        a = A.align_and_stack(bands, 1, workers=1, **kw)
        b = A.align_and_stack(bands, 1, workers=4, **kw)
        assert a.data.tobytes() == b.data.tobytes()
