import numpy as np
import pytest

from backloc.bilateral import (
    Refiner,
    SolverParams,
    assemble_system,
    bistochastize,
    build_grid,
    pcg_solve,
    refine,
    rgb_to_ycbcr,
    solve,
)
from backloc.errors import ConfigError, SingularSystemError
from backloc.shards import BinaryMask, RgbImage, SoftMask
from conftest import smooth_image
from oracle_bilateral import dense_solve, quantize_coords

# tight tolerances so CG runs to numerical convergence where tests
# compare against the dense oracle
TIGHT = dict(cg_tol=1e-10, cg_max_iters=500)


def small_params(**kw):
    base = dict(sigma_spatial=4.0, sigma_luma=16.0, sigma_chroma=8.0, lam=16.0)
    base.update(kw)
    return SolverParams(**base)


class TestYcbcr:
    def test_black_white(self):
        img = np.array([[[0, 0, 0], [255, 255, 255]]], np.uint8)
        ycc = rgb_to_ycbcr(img)
        np.testing.assert_allclose(ycc[0, 0], [0.0, 128.0, 128.0], atol=1e-9)
        np.testing.assert_allclose(ycc[0, 1], [255.0, 128.0, 128.0], atol=1e-6)

    def test_pure_red(self):
        img = np.array([[[255, 0, 0]]], np.uint8)
        y, cb, cr = rgb_to_ycbcr(img)[0, 0]
        assert y == pytest.approx(76.245, abs=1e-3)
        assert cr > 128 and cb < 128


class TestGrid:
    def test_single_pixel_single_vertex(self):
        grid = build_grid(RgbImage(np.zeros((1, 1, 3), np.uint8)), SolverParams())
        assert grid.nvertices == 1

    def test_constant_image_large_sigma_collapses(self):
        img = RgbImage(np.full((8, 8, 3), 77, np.uint8))
        grid = build_grid(img, SolverParams(sigma_spatial=8.0))
        assert grid.nvertices == 1

    def test_two_tone_matches_quantization_oracle(self, rng):
        img = np.zeros((8, 8, 3), np.uint8)
        img[:, 4:] = 200
        params = small_params(sigma_spatial=2.0, sigma_luma=4.0)
        grid = build_grid(RgbImage(img), params)
        coords = quantize_coords(img, params)
        # same-cell pixels map to the same vertex, different cells differ
        for p in range(64):
            for q in range(64):
                same = coords[p] == coords[q]
                assert (grid.pixel_to_vertex[p] == grid.pixel_to_vertex[q]) == same

    def test_every_pixel_has_one_vertex(self, rng):
        img = RgbImage(smooth_image(rng, 12, 9))
        grid = build_grid(img, small_params())
        assert grid.pixel_to_vertex.shape == (12 * 9,)
        assert grid.nvertices <= grid.npixels
        assert (grid.pixel_to_vertex >= 0).all()
        assert (grid.pixel_to_vertex < grid.nvertices).all()


class TestBistochastization:
    def test_smoothness_rows_sum_to_zero(self, rng):
        img = RgbImage(smooth_image(rng, 10, 10))
        grid = build_grid(img, small_params())
        n, m = bistochastize(grid)
        # row sums of the smoothness operator vanish exactly after the
        # closing m correction
        lap_row_sums = m - n * grid.blur(n)
        np.testing.assert_allclose(lap_row_sums, 0.0, atol=1e-9)


class TestSolve:
    def test_constant_target_is_fixed_point(self, rng):
        img = RgbImage(smooth_image(rng, 12, 12))
        grid = build_grid(img, SolverParams())
        target = SoftMask("pixel", np.full((12, 12), 0.5))
        conf = SoftMask("pixel", np.ones((12, 12)))
        out = solve(grid, target, conf, SolverParams())
        np.testing.assert_allclose(out.values, 0.5, atol=1e-6)

    def test_zero_confidence_rejected(self, rng):
        img = RgbImage(smooth_image(rng, 6, 6))
        grid = build_grid(img, SolverParams())
        target = SoftMask("pixel", np.zeros((6, 6)))
        conf = SoftMask("pixel", np.zeros((6, 6)))
        with pytest.raises(SingularSystemError):
            solve(grid, target, conf, SolverParams())

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        img = smooth_image(rng, 16, 16)
        target = rng.random((16, 16))
        conf = np.ones((16, 16)) if seed % 2 else rng.uniform(0.2, 1.0, (16, 16))
        params = small_params(**TIGHT)
        grid = build_grid(RgbImage(img), params)
        got = solve(
            grid, SoftMask("pixel", target), SoftMask("pixel", conf), params
        )
        expected, _ = dense_solve(img, target, conf, params)
        assert np.abs(got.values - expected).max() <= 1e-4

    def test_range_preservation(self, rng):
        # maximum principle: fully converged output stays inside the
        # target's range (up to tiny numerical slack)
        img = RgbImage(smooth_image(rng, 14, 14))
        params = small_params(**TIGHT)
        grid = build_grid(img, params)
        target = rng.uniform(0.2, 0.8, (14, 14))
        out = solve(
            grid,
            SoftMask("pixel", target),
            SoftMask("pixel", np.ones((14, 14))),
            params,
        )
        assert out.values.min() >= target.min() - 1e-6
        assert out.values.max() <= target.max() + 1e-6

    def test_system_symmetric_positive_definite(self, rng):
        img = RgbImage(smooth_image(rng, 10, 10))
        params = small_params()
        grid = build_grid(img, params)
        conf = rng.uniform(0.0, 1.0, 100)
        conf[0] = 0.5  # any positive entry suffices
        A, _, _ = assemble_system(grid, conf, params)
        dense = A.toarray()
        np.testing.assert_allclose(dense, dense.T, atol=0.0)
        eigs = np.linalg.eigvalsh(dense)
        assert eigs.min() > 0

    def test_monotone_residual_trace(self, rng):
        img = RgbImage(smooth_image(rng, 16, 16))
        params = small_params(**TIGHT)
        grid = build_grid(img, params)
        conf = np.ones(grid.npixels)
        A, _, _ = assemble_system(grid, conf, params)
        for _ in range(10):
            t = rng.random(grid.npixels)
            b = grid.splat(conf * t)
            x0 = b / np.maximum(grid.splat(conf), 1e-10)
            _, trace = pcg_solve(A, b, x0, 1e-10, 200)
            assert all(trace[i + 1] <= trace[i] for i in range(len(trace) - 1))

    def test_deterministic(self, rng):
        img = RgbImage(smooth_image(rng, 12, 12))
        params = small_params()
        grid = build_grid(img, params)
        target = SoftMask("pixel", rng.random((12, 12)))
        conf = SoftMask("pixel", np.ones((12, 12)))
        a = solve(grid, target, conf, params)
        b = solve(grid, target, conf, params)
        assert a.values.tobytes() == b.values.tobytes()


class TestRefine:
    def test_constant_binary_mask_on_flat_image_unchanged(self):
        img = RgbImage(np.full((10, 10, 3), 100, np.uint8))
        mask = SoftMask("pixel", np.ones((10, 10)))
        out = refine(img, mask, SolverParams())
        assert (out.values == 1).all()

    def test_isolated_vertices_make_refine_identity(self, rng):
        # sub-pixel sigma_spatial leaves every vertex disconnected, so
        # any binary mask passes through the solver untouched
        img = RgbImage(smooth_image(rng, 8, 8))
        mask_values = (rng.random((8, 8)) < 0.5).astype(np.float64)
        params = small_params(sigma_spatial=0.5)
        out = refine(img, SoftMask("pixel", mask_values), params)
        np.testing.assert_array_equal(out.values, mask_values.astype(np.uint8))

    def test_salt_speck_removed(self):
        img = RgbImage(np.full((16, 16, 3), 90, np.uint8))
        mask_values = np.zeros((16, 16))
        mask_values[8, 8] = 1.0
        params = small_params(sigma_spatial=2.0, **TIGHT)
        out = refine(img, SoftMask("pixel", mask_values), params)
        assert out.values.sum() == 0
        # the dense oracle confirms the speck's smoothed value is tiny
        dense, _ = dense_solve(img.values, mask_values, np.ones((16, 16)), params)
        assert dense[8, 8] < params.binarize_threshold

    def test_all_zero_mask_stays_zero(self, rng):
        img = RgbImage(smooth_image(rng, 9, 9))
        out = refine(img, SoftMask("pixel", np.zeros((9, 9))), SolverParams())
        assert out.values.sum() == 0


class TestRefiner:
    def test_matches_one_shot_refine(self, rng):
        img = RgbImage(smooth_image(rng, 12, 12))
        params = small_params()
        refiner = Refiner(img, params)
        target = SoftMask("pixel", rng.random((12, 12)))
        cached = refiner.refine(target)
        oneshot = refine(img, target, params)
        np.testing.assert_array_equal(cached.values, oneshot.values)


class TestParams:
    def test_validation(self):
        with pytest.raises(ConfigError):
            SolverParams(sigma_spatial=0.0)
        with pytest.raises(ConfigError):
            SolverParams(lam=-1.0)
        with pytest.raises(ConfigError):
            SolverParams(binarize_threshold=1.0)
