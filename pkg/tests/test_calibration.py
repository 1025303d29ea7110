import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atta.adaptation import infer
from atta.calibration import (GmmFit, calibrate_image, crossing_point, find_peaks, fit_gmm_1d,
                              platt_calibrate, weighted_density)
from atta.nn import load_checkpoint
from atta.scenes import SceneSpec, generate_scene
from atta.selective_bn import sigmoid

REFERENCE = Path(__file__).parent / "data" / "reference_model"


def _bimodal(n=2000, seed=0, w=0.5, m=(-2.0, 2.0), s=(0.3, 0.3)):
    rng = np.random.default_rng(seed)
    k = rng.random(n) < w
    return np.where(k, rng.normal(m[0], s[0], n), rng.normal(m[1], s[1], n))


def test_gmm_recovers_generating_mixture():
    fit = fit_gmm_1d(_bimodal())
    assert fit.converged and not fit.collapsed
    assert abs(fit.mu1 + 2) < 0.1 and abs(fit.mu2 - 2) < 0.1
    assert abs(fit.pi1 - 0.5) < 0.05 and abs(fit.pi2 - 0.5) < 0.05
    assert abs(fit.pi1 + fit.pi2 - 1) < 1e-9
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)


def test_gmm_identical_scores_collapse():
    fit = fit_gmm_1d(np.full(100, 3.0))
    assert fit.collapsed and not fit.converged


def test_gmm_needs_50_samples():
    with pytest.raises(ValueError):
        fit_gmm_1d(np.arange(49.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9), st.floats(1.0, 6.0), st.floats(0.2, 2.0))
def test_gmm_loglik_monotone_and_sorted(seed, w, gap, s2):
    fit = fit_gmm_1d(_bimodal(600, seed, w, (0.0, gap), (0.5, s2)))
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)
    if not fit.collapsed:
        assert fit.mu1 <= fit.mu2
        assert abs(fit.pi1 + fit.pi2 - 1) < 1e-9


def test_peaks_finds_right_most_mode():
    x = np.r_[np.random.default_rng(1).normal(0, 1, 3000), np.random.default_rng(2).normal(8, 0.5, 300)]
    centers, heights = find_peaks(x)
    assert centers[-1] == pytest.approx(8, abs=0.5)
    assert centers[np.argmax(heights)] == pytest.approx(0, abs=0.5)


def _fit(p1, m1, m2, s1, s2):
    return GmmFit(p1, 1 - p1, m1, m2, s1, s2, 0.0, 1, True)


def test_crossing_symmetric_midpoint():
    a, fb = crossing_point(_fit(0.5, -1.3, 2.1, 0.7, 0.7))
    assert fb == "none"
    assert a == pytest.approx(0.4, abs=1e-12)


def _bisect(fit, lo, hi):
    f = lambda a: (weighted_density(a, fit.pi1, fit.mu1, fit.sigma1)
                   - weighted_density(a, fit.pi2, fit.mu2, fit.sigma2))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (f(lo) > 0) == (f(mid) > 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_crossing_matches_bisection():
    fit = _fit(0.7, -1.0, 1.0, 0.5, 0.5)
    a, fb = crossing_point(fit)
    assert fb == "none"
    assert a == pytest.approx(_bisect(fit, fit.mu1, fit.mu2), abs=1e-6)


def test_crossing_unequal_sigma_residual():
    fit = _fit(0.8, 0.0, 2.0, 0.4, 1.1)
    a, fb = crossing_point(fit)
    assert fb == "none"
    d1 = weighted_density(a, fit.pi1, fit.mu1, fit.sigma1)
    d2 = weighted_density(a, fit.pi2, fit.mu2, fit.sigma2)
    peak = max(weighted_density(fit.mu1, fit.pi1, fit.mu1, fit.sigma1),
               weighted_density(fit.mu2, fit.pi2, fit.mu2, fit.sigma2))
    assert abs(d1 - d2) < 1e-8 * peak
    # it is the largest crossing
    assert a > fit.mu1


def test_crossing_midpoint_fallback():
    # the outlier component is everywhere below the inlier one: no crossing in range
    a, fb = crossing_point(_fit(0.999, 0.0, 0.5, 2.0, 1.0))
    assert fb == "midpoint" and a == 0.25


def test_platt_examples():
    assert platt_calibrate(1.5, 1.5, 2.0) == 0.5
    assert platt_calibrate(3.5, 1.5, 2.0) == pytest.approx(0.7310585786, abs=1e-9)
    g = np.linspace(-5, 5, 101)
    assert np.all(np.diff(platt_calibrate(g, 0.3, 0.7)) > 0)
    with pytest.raises(ValueError):
        platt_calibrate(g, 0.0, 0.0)


def test_calibrate_bimodal_fraction():
    scores = _bimodal(4096, 3, w=0.8, m=(-1.0, 3.0), s=(0.5, 0.5)).reshape(64, 64)
    gbar, params, fit = calibrate_image(scores, "gmm", seed=0)
    assert params.fallback_used == "none"
    assert abs((gbar > 0.5).mean() - 0.2) < 0.05
    assert params.b_x == pytest.approx(scores.std())


def test_calibrate_zscore_identity():
    g = np.random.default_rng(0).standard_normal(500)
    g = (g - g.mean()) / g.std()
    gbar, params, fit = calibrate_image(g, "zscore")
    assert fit is None
    np.testing.assert_allclose(gbar, sigmoid(g), rtol=1e-12, atol=1e-15)


def test_calibrate_collapse_falls_back_to_zscore():
    gbar, params, fit = calibrate_image(np.full((10, 10), 2.0), "gmm")
    assert params.fallback_used == "zscore" and fit.collapsed
    np.testing.assert_allclose(gbar, 0.5)


def test_calibrate_deterministic_and_subsampled():
    g = _bimodal(20_000, 5).reshape(100, 200)
    a = calibrate_image(g, "gmm", seed=[1, 2])
    b = calibrate_image(g, "gmm", seed=[1, 2])
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1] == b[1]


def test_calibrate_rejects_small_maps():
    with pytest.raises(ValueError):
        calibrate_image(np.zeros(10))
    with pytest.raises(ValueError):
        calibrate_image(np.zeros(100), "other")


def test_clean_scene_without_novel_pixels_few_confident_outliers():
    ckpt = load_checkpoint(REFERENCE)
    fractions = []
    for seed in range(10):
        img = generate_scene(SceneSpec(seed=500 + seed, ood_enabled=False)).image
        _, G = infer(ckpt, img)
        gbar, params, _ = calibrate_image(G, "gmm", seed)
        fractions.append((gbar > 0.6).mean())
    assert np.mean(fractions) < 0.05
