import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from qscope.analysis import (
    EdgeFitError, EdgeRegion, MaskPair, confocal_limit, edge_jacobian, edge_model,
    edge_residual_jacobian, edge_residuals, extract_linescans, fit_edge, fit_linescans,
    fit_sqrt_scaling, idler_wavelength, initial_edge_guess, snr, snr_curve, threshold_mask,
)
from qscope.scan import ImageGrid, assign_pixels
from qscope.simulate import SourceModel, make_grating, simulate
from qscope.timetag import ScanConfig


def test_idler_wavelength_source_value():
    assert idler_wavelength(772.3, 1435) == pytest.approx(1672.3, abs=1)


def test_idler_wavelength_degenerate_point():
    assert idler_wavelength(800.0, 1600.0) == pytest.approx(1600.0, rel=1e-12)


@pytest.mark.parametrize("lp,ls", [(405.0, 700.0), (772.3, 1435.0), (532.0, 1550.0)])
def test_idler_wavelength_involution(lp, ls):
    assert idler_wavelength(lp, idler_wavelength(lp, ls)) == pytest.approx(ls, rel=1e-9)


@pytest.mark.parametrize("lp,ls", [(800, 800), (900, 800), (0, 800)])
def test_idler_wavelength_unphysical(lp, ls):
    with pytest.raises(ValueError):
        idler_wavelength(lp, ls)


def test_confocal_limit_values():
    assert confocal_limit(1.673, 0.3) == pytest.approx(1.84, abs=0.005)
    assert confocal_limit(1.673, 0.5) == pytest.approx(1.10, abs=0.005)
    assert confocal_limit(1.0, 0.33) == pytest.approx(1.0, rel=1e-12)


def test_confocal_limit_scaling():
    base = confocal_limit(1.5, 0.4)
    assert confocal_limit(3.0, 0.4) == pytest.approx(2 * base, rel=1e-12)
    assert confocal_limit(1.5, 0.8) == pytest.approx(base / 2, rel=1e-12)


@pytest.mark.parametrize("na", [0.0, -0.1, 1.7])
def test_confocal_limit_rejects_na(na):
    with pytest.raises(ValueError):
        confocal_limit(1.0, na)


def test_uniform_image_mask():
    m = threshold_mask(np.full((4, 4), 7))
    assert not m.bright.any() and m.dark.all()


def test_two_level_mask():
    img = np.zeros((10, 10))
    img[:, :5] = 100
    m = threshold_mask(ImageGrid(img))
    assert np.array_equal(m.bright, img == 100)
    assert np.array_equal(m.dark, img == 0)


def test_mask_pair_rejects_overlap():
    with pytest.raises(ValueError):
        MaskPair(np.ones((2, 2), bool), np.ones((2, 2), bool))


def test_simulated_mask_agrees_with_pattern():
    cfg = ScanConfig(pixels_x=48, pixels_y=48)
    sample = make_grating(20, 10, 100, resolution=480, blur_sigma=2.0)
    src = SourceModel(pair_rate=1e6, signal_efficiency=0.5, idler_path_efficiency=0.5, rng_seed=2)
    sim = simulate(sample, src, cfg, cfg.duration_for_frames(10))
    idler = assign_pixels(sim.idler, sim.timeline)
    mask = threshold_mask(idler)
    centers = (np.arange(48) + 0.5) * cfg.pixel_pitch
    on = np.mod(centers, 30) < 20
    truth = np.outer(on, on)
    # distance in µm from every pixel centre to the nearest edge
    d1 = np.minimum(np.abs(np.mod(centers, 30) - 20), np.minimum(np.mod(centers, 30), 30 - np.mod(centers, 30)))
    away = np.minimum.outer(d1, d1) > 4.0
    assert np.mean(mask.bright[away] == truth[away]) >= 0.95


def test_snr_zero_for_constant_image():
    img = np.full((4, 4), 3.0)
    m = MaskPair(np.eye(4, dtype=bool), ~np.eye(4, dtype=bool))
    assert snr(img, m) == 0.0


def test_snr_poisson_monte_carlo():
    rng = np.random.default_rng(0)
    img = np.zeros((40, 50))
    img[:20] = rng.poisson(100, (20, 50))
    m = MaskPair(np.arange(40)[:, None].repeat(50, 1) < 20, np.arange(40)[:, None].repeat(50, 1) >= 20)
    assert snr(img, m) == pytest.approx(10.0, rel=0.1)


def test_snr_shift_and_scale_invariance():
    rng = np.random.default_rng(1)
    img = rng.poisson(20, (30, 30)).astype(float)
    img[:, :15] += 40
    m = threshold_mask(img)
    base = snr(img, m)
    assert snr(img + 1234.0, m) == pytest.approx(base, rel=1e-12)
    assert snr(img * 7.5, m) == pytest.approx(base, rel=1e-12)


def test_snr_empty_region_errors():
    with pytest.raises(ValueError):
        snr(np.ones((2, 2)), MaskPair(np.zeros((2, 2), bool), np.ones((2, 2), bool)))


def test_snr_curve_matches_direct_sums():
    rng = np.random.default_rng(2)
    stack = rng.poisson(3, (12, 10, 10))
    stack[:, :, :5] += rng.poisson(4, (12, 10, 5))
    m = threshold_mask(stack.sum(axis=0))
    k, values = snr_curve(stack, m)
    assert k.tolist() == list(range(1, 13))
    for n in (1, 5, 12):
        assert values[n - 1] == pytest.approx(snr(stack[:n].sum(axis=0), m), rel=1e-12)


def test_snr_grows_as_sqrt_frames():
    rng = np.random.default_rng(3)
    level = np.zeros((20, 20))
    level[:, :10] = 2.0
    stack = rng.poisson(level + 0.5, (200, 20, 20))
    m = threshold_mask(level)
    k, values = snr_curve(stack, m)
    assert fit_sqrt_scaling(np.column_stack([k, values])).r_squared > 0.95


def test_sqrt_fit_exact():
    res = fit_sqrt_scaling([(1, 2.0), (4, 4.0), (9, 6.0)])
    assert res.A == pytest.approx(2.0) and res.r_squared == pytest.approx(1.0)


def test_sqrt_fit_noisy():
    rng = np.random.default_rng(4)
    x = np.arange(1, 101)
    res = fit_sqrt_scaling(np.column_stack([x, 2 * np.sqrt(x) + rng.normal(0, 0.1, x.size)]))
    assert abs(res.A - 2) <= 0.1 and res.r_squared > 0.95


def test_sqrt_fit_single_point():
    res = fit_sqrt_scaling([(4, 3.0)])
    assert res.r_squared == 1.0 and res.A == 1.5 and res.degenerate


def test_sqrt_fit_all_zero_errors():
    with pytest.raises(ValueError, match="degenerate"):
        fit_sqrt_scaling([(1, 0.0), (2, 0.0)])


def test_sqrt_fit_r2_bounded():
    res = fit_sqrt_scaling([(1, 5.0), (2, 1.0), (3, 4.0), (4, 0.5)])
    assert res.r_squared <= 1


X = np.arange(30) * 1.04 + 0.52


def test_edge_fit_noise_free():
    truth = np.array([400.0, 500.0, 15.3, 2.0])
    res = fit_edge(X, edge_model(X, truth))
    assert res.sigma_res == pytest.approx(2.0, rel=0.01)
    assert res.center == pytest.approx(15.3, rel=1e-4)
    assert not res.sharp_edge


def test_edge_fit_falling_edge():
    truth = np.array([-300.0, 350.0, 12.0, 1.5])
    res = fit_edge(X, edge_model(X, truth))
    assert res.sigma_res == pytest.approx(1.5, rel=0.01)
    assert res.amplitude < 0


def test_initial_guess_follows_recipe():
    y = edge_model(X, [100.0, 150.0, 15.0, 2.0])
    A, B, c, s = initial_edge_guess(X, y)
    assert A == pytest.approx((y.max() - y.min()) / 2)
    assert B == pytest.approx((y.max() + y.min()) / 2)
    assert c == pytest.approx(15.0, abs=0.2)
    # 10-90 % rise of a Gaussian edge is 2.563 sigma
    assert s == pytest.approx(2.563 * 2.0 / 4, rel=0.1)


def test_edge_fit_sharp_step_flagged():
    y = np.where(X < 15.0, 50.0, 500.0)
    res = fit_edge(X, y)
    assert res.sharp_edge and res.sigma_res > 0


def test_edge_fit_preconditions():
    with pytest.raises(ValueError):
        fit_edge(X[:5], np.ones(5))
    with pytest.raises(ValueError):
        fit_edge(X[::-1], np.ones(X.size))


def test_edge_fit_nonconvergence_carries_best():
    rng = np.random.default_rng(5)
    y = rng.poisson(edge_model(X, [100, 200, 15, 2.0]))
    with pytest.raises(EdgeFitError) as info:
        fit_edge(X, y, max_iter=1)
    assert info.value.best is not None and info.value.best.shape == (4,)
    assert info.value.diagnostics["iterations"] == 1


def test_edge_fit_rejects_flat_profile():
    rng = np.random.default_rng(6)
    with pytest.raises(EdgeFitError):
        fit_edge(X, rng.poisson(5, X.size))


def test_edge_fit_coverage():
    rng = np.random.default_rng(7)
    mu = edge_model(X, [180.0, 240.0, 15.0, 2.0])
    n, hits = 400, 0
    for _ in range(n):
        res = fit_edge(X, rng.poisson(mu))
        hits += abs(res.sigma_res - 2.0) <= 2 * res.stderr["sigma_res"]
    assert hits / n >= 0.9


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = np.array([rng.uniform(-500, 500), rng.uniform(0, 500), rng.uniform(5, 25), rng.uniform(0.5, 5)])
        y = rng.poisson(np.abs(edge_model(X, p)) + 1)
        J = edge_residual_jacobian(X, y, p)
        num = np.empty_like(J)
        for k in range(4):
            h = 1e-6 * max(abs(p[k]), 1.0)
            e = np.zeros(4)
            e[k] = h
            num[:, k] = (edge_residuals(X, y, p + e) - edge_residuals(X, y, p - e)) / (2 * h)
        err = np.linalg.norm(J - num, axis=0) / np.maximum(np.linalg.norm(num, axis=0), 1e-300)
        assert np.all(err <= 1e-5)
    assert edge_jacobian(X, p).shape == (X.size, 4)


def test_extract_twenty_profiles():
    grid = ImageGrid(np.arange(40 * 30).reshape(40, 30), pixel_pitch=1.04)
    scans = extract_linescans(grid, EdgeRegion((10, 30), (5, 25), 20))
    assert len(scans) == 20
    assert {s.counts.size for s in scans} == {20}
    assert scans[0].positions[0] == pytest.approx(5.5 * 1.04)


def test_extract_single_profile_equals_row():
    img = np.zeros((5, 12))
    img[:, 6:] = 9
    (scan,) = extract_linescans(img, EdgeRegion((2, 3), (0, 12), 1))
    assert np.array_equal(scan.counts, img[2])


def test_extract_along_y():
    img = np.arange(60).reshape(10, 6)
    scans = extract_linescans(img, EdgeRegion((0, 10), (1, 4), 3, axis="y"))
    assert [s.index for s in scans] == [1, 2, 3]
    assert np.array_equal(scans[1].counts, img[:, 2])


@pytest.mark.parametrize("region", [EdgeRegion((0, 50), (0, 5), 2), EdgeRegion((0, 5), (-1, 5), 2),
                                    EdgeRegion((0, 3), (0, 5), 4)])
def test_extract_rejects_bad_region(region):
    with pytest.raises(ValueError):
        extract_linescans(np.zeros((10, 10)), region)


def test_fit_linescans_parallel_matches_serial():
    rng = np.random.default_rng(9)
    rows = np.stack([rng.poisson(edge_model(X, [100, 150, 15, 2.0])) for _ in range(8)])
    scans = extract_linescans(ImageGrid(rows, pixel_pitch=1.04), EdgeRegion((0, 8), (0, 30), 8))
    serial = fit_linescans(scans)
    with ThreadPoolExecutor(3) as pool:
        parallel = fit_linescans(scans, pool)
    assert np.array_equal(serial.sigmas, parallel.sigmas)
    assert len(serial.fits) == 8 and not serial.failures
    assert math.isfinite(serial.std)


def test_fit_linescans_collects_failures():
    img = np.vstack([edge_model(X, [100, 150, 15, 2.0]), np.full(30, 5.0)])
    summary = fit_linescans(extract_linescans(img, EdgeRegion((0, 2), (0, 30), 2)))
    assert len(summary.fits) == 1 and summary.failures[0][0] == 1
