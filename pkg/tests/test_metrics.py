import numpy as np
import pytest

from pointtryon.flow import DisplacementField, warp_image
from pointtryon.metrics import (
    HomographyError,
    correspondence_rate,
    describe_points,
    estimate_homography,
    match_points_into_image,
    nn_match,
    patch_descriptor,
    point_match_mse,
    ssim,
)
from pointtryon.points import PointSet
from pointtryon.synthdata import generate_sample, GeneratorParams


def _test_image(seed=0, shape=(3, 48, 48)):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1, 1, shape)
    # add structure so SSIM has something to measure
    img[..., 8:, 8:] += 0.5
    return np.clip(img, -1, 1)


class TestSsim:
    def test_identical_images_exactly_one(self):
        img = _test_image()
        assert ssim(img, img) == 1.0

    def test_monotone_under_noise(self):
        img = _test_image(1)
        rng = np.random.default_rng(2)
        vals = []
        for sigma in (0.05, 0.1, 0.2):
            noisy = np.clip(img + rng.normal(0, sigma, img.shape), -1, 1)
            vals.append(ssim(img, noisy))
        assert vals[0] > vals[1] > vals[2]

    def test_symmetric(self):
        a, b = _test_image(3), _test_image(4)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((5, 5)))


class TestPatchDescriptor:
    def test_constant_patch_zero_vector(self):
        d = patch_descriptor(0.3 * np.ones((16, 16)), (8, 8), radius=4)
        assert np.all(d == 0)

    def test_unit_norm(self):
        img = _test_image(5, (16, 16))
        d = patch_descriptor(img, (8, 8), radius=4)
        assert abs(np.linalg.norm(d) - 1) < 1e-12
        assert d.shape == (81,)

    def test_identical_content_identical_descriptor(self):
        img = np.zeros((20, 20))
        patch = np.random.default_rng(0).uniform(-1, 1, (5, 5))
        img[2:7, 2:7] = patch
        img[12:17, 12:17] = patch
        a = patch_descriptor(img, (4, 4), radius=2)
        b = patch_descriptor(img, (14, 14), radius=2)
        assert np.allclose(a, b)

    def test_border_points_valid(self):
        img = _test_image(6, (12, 12))
        d = patch_descriptor(img, (0, 0), radius=4)
        assert np.isfinite(d).all()


class TestNnMatch:
    def test_self_match_identity(self):
        rng = np.random.default_rng(0)
        d = rng.normal(size=(10, 8))
        pairs = nn_match(d, d, ratio=1.0)
        assert pairs == [(i, i) for i in range(10)]

    def test_empty_inputs(self):
        assert nn_match(np.zeros((0, 8)), np.zeros((3, 8))) == []
        assert nn_match(np.zeros((3, 8)), np.zeros((0, 8))) == []

    def test_duplicate_neighbors_fail_ratio(self):
        # query equidistant to two candidates: ratio 1 >= 0.8 rejected
        query = np.array([[1.0, 0.0]])
        cands = np.array([[0.0, 1.0], [2.0, -1.0], [9.0, 9.0]])
        assert nn_match(query, cands, ratio=0.8) == []

    def test_mutual_nearest_enforced(self):
        a = np.array([[0.0], [0.2]])
        b = np.array([[0.05]])
        pairs = nn_match(a, b, ratio=1.0)
        assert pairs == [(0, 0)]


def _planted_homography_pairs(rng, n=40, outlier_frac=0.0):
    H = np.array([
        [1.0 + rng.uniform(-0.05, 0.05), rng.uniform(-0.1, 0.1), rng.uniform(-5, 5)],
        [rng.uniform(-0.1, 0.1), 1.0 + rng.uniform(-0.05, 0.05), rng.uniform(-5, 5)],
        [rng.uniform(-1e-3, 1e-3), rng.uniform(-1e-3, 1e-3), 1.0],
    ])
    src = rng.uniform(0, 63, size=(n, 2))
    ph = np.c_[src, np.ones(n)]
    q = (H @ ph.T).T
    dst = q[:, :2] / q[:, 2:3]
    n_out = int(outlier_frac * n)
    if n_out:
        idx = rng.choice(n, n_out, replace=False)
        dst[idx] += rng.uniform(8, 25, size=(n_out, 2)) * rng.choice([-1, 1], (n_out, 2))
    return H, src, dst, n_out


class TestHomography:
    def test_identity_recovered(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(0, 50, (20, 2))
        H, inl = estimate_homography(src, src, seed=0)
        assert np.allclose(H, np.eye(3), atol=1e-8)
        assert inl.all()

    def test_translation_with_outliers(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(0, 40, (8, 2))
        dst = src + [3.0, 5.0]
        src = np.vstack([src, [[0, 0], [10, 10]]])
        dst = np.vstack([dst, [[35, 2], [1, 38]]])
        H, inl = estimate_homography(src, dst, seed=0)
        want = np.array([[1, 0, 3], [0, 1, 5], [0, 0, 1.0]])
        assert np.abs(H - want).max() < 1e-3
        assert inl[:8].all() and not inl[8:].any()

    def test_clean_data_high_precision(self):
        rng = np.random.default_rng(2)
        H_true, src, dst, _ = _planted_homography_pairs(rng, n=100)
        H, inl = estimate_homography(src, dst, seed=3)
        corners = np.array([[0, 0], [0, 63], [63, 0], [63, 63]], dtype=float)
        ph = np.c_[corners, np.ones(4)]
        a = (H @ ph.T).T
        b = (H_true @ ph.T).T
        err = np.abs(a[:, :2] / a[:, 2:] - b[:, :2] / b[:, 2:]).max()
        assert err < 1e-6
        assert inl.all()

    def test_collinear_input_raises(self):
        src = np.array([[float(i), float(i)] for i in range(8)])
        with pytest.raises((HomographyError, ValueError)):
            estimate_homography(src, src + 1.0, iters=50, seed=0)

    def test_rejects_too_few_pairs(self):
        with pytest.raises(ValueError):
            estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        _, src, dst, _ = _planted_homography_pairs(rng, n=30, outlier_frac=0.3)
        H1, i1 = estimate_homography(src, dst, seed=9)
        H2, i2 = estimate_homography(src, dst, seed=9)
        assert np.array_equal(H1, H2) and np.array_equal(i1, i2)


class TestCorrespondenceRate:
    def _warped_pair(self, seed=1):
        s = generate_sample(seed, GeneratorParams())
        g = s.garment
        # plant a mild homography via an affine displacement field
        h, w = g.shape[-2:]
        A = np.array([[0.97, 0.03], [-0.02, 1.01]])
        b = np.array([1.5, -1.0])
        Ainv = np.linalg.inv(A)
        rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                             indexing="ij")
        pos = np.stack([rr, cc], -1) @ Ainv.T - (Ainv @ b)
        off = np.stack([rr, cc], -1) - pos
        out = warp_image(g, DisplacementField(off))
        return g, out

    def test_exact_warp_high_inlier_rate(self):
        g, out = self._warped_pair(1)
        rep = correspondence_rate(g, out, seed=0)
        assert rep.inlier_rate >= 0.9
        assert rep.homography is not None
        assert rep.homography[2, 2] == 1.0
        assert rep.inlier_count == rep.inliers.sum()

    def test_unrelated_noise_no_structure(self):
        g, _ = self._warped_pair(4)
        noise = np.random.default_rng(0).uniform(-1, 1, g.shape)
        rep = correspondence_rate(g, noise, seed=0)
        assert rep.inlier_count <= 4

    def test_deterministic(self):
        g, out = self._warped_pair(7)
        a = correspondence_rate(g, out, seed=5)
        b = correspondence_rate(g, out, seed=5)
        assert np.array_equal(a.inliers, b.inliers)
        assert a.inlier_rate == b.inlier_rate


class TestPointMatchMse:
    def test_exact_match_zero(self):
        ps = PointSet(np.array([[1.0, 2.0], [3.0, 4.0]]), frame=(8, 8))
        assert point_match_mse(ps, ps) == 0.0

    def test_uniform_one_pixel_offset(self):
        a = PointSet(np.array([[1.0, 2.0], [3.0, 4.0]]), frame=(8, 8))
        b = PointSet(np.array([[2.0, 2.0], [4.0, 4.0]]), frame=(8, 8))
        assert point_match_mse(b, a) == 1.0

    def test_rejects_count_mismatch(self):
        a = PointSet(np.array([[1.0, 2.0]]), frame=(8, 8))
        b = PointSet(np.array([[1.0, 2.0], [3.0, 4.0]]), frame=(8, 8))
        with pytest.raises(ValueError):
            point_match_mse(a, b)


class TestMatchPointsIntoImage:
    def test_perfect_copy_matches_exactly(self):
        # template == output: every point must match at its expected spot
        s = generate_sample(3, GeneratorParams())
        template = warp_image(s.garment, s.gt_flow)
        pred = match_points_into_image(template, template, s.gt_points_h)
        assert point_match_mse(pred, s.gt_points_h) < 0.5

    def test_discriminates_faithful_from_noise(self):
        s = generate_sample(4, GeneratorParams())
        template = warp_image(s.garment, s.gt_flow)
        good = match_points_into_image(template, s.person, s.gt_points_h)
        noise = np.random.default_rng(0).uniform(-1, 1, s.person.shape)
        bad = match_points_into_image(template, noise, s.gt_points_h)
        assert point_match_mse(good, s.gt_points_h) < point_match_mse(bad, s.gt_points_h)

    def test_degenerate_output_stays_at_expected(self):
        s = generate_sample(5, GeneratorParams())
        template = warp_image(s.garment, s.gt_flow)
        flat = np.zeros_like(s.person)
        pred = match_points_into_image(template, flat, s.gt_points_h)
        assert len(pred) == len(s.gt_points_h)
