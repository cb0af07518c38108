import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from dropping.errors import ConfigurationError, InputError, RankError, StateError
from dropping.smoothing import (ErrorCurve, SmootherConfig, bspline_basis, clamped_knot_vector,
                                estimate_delta, fit_smoothing_spline, gaussian_kernel_smooth,
                                lowess_smooth, moving_avg_slope, smooth_values)


def noisy_curve(n, seed, step=20.0):
    rng = np.random.default_rng(seed)
    x = np.arange(1, n + 1) * step
    y = 0.5 * np.exp(-x / (n * step / 3)) + 0.1 + rng.normal(0, 0.02, n)
    return x, np.abs(y)


# ---------------------------------------------------------------- ErrorCurve

def test_error_curve_validation():
    c = ErrorCurve()
    c.append(20, 0.4)
    with pytest.raises(InputError):
        c.append(20, 0.3)
    with pytest.raises(InputError):
        c.append(40, float("nan"))
    with pytest.raises(InputError):
        c.append(40, -0.1)
    assert len(c) == 1


# ---------------------------------------------------------------- moving average

def test_moving_average_examples():
    assert moving_avg_slope(([0, 1, 2, 3], [1.0, 0.9, 0.8, 0.7]), 3) == pytest.approx(-0.1, abs=1e-12)
    assert moving_avg_slope(([0, 20, 40], [0.3, 0.3, 0.3]), 2) == 0.0
    with pytest.raises(StateError):
        moving_avg_slope(([0, 1], [1.0, 0.5]), 2)


def test_moving_average_matches_loop_oracle():
    x, y = noisy_curve(50, 1)
    x = x + np.random.default_rng(2).integers(0, 5, 50).cumsum()  # uneven gaps
    for k in (1, 5, 17, 49):
        total = 0.0
        for i in range(len(x) - k, len(x)):
            total += (y[i] - y[i - 1]) / (x[i] - x[i - 1])
        assert abs(moving_avg_slope((x, y), k) - total / k) < 1e-12


def test_moving_average_exact_on_affine():
    x = np.array([0, 20, 40, 70, 100, 160], float)
    assert abs(moving_avg_slope((x, 0.9 - 0.0025 * x), 5) + 0.0025) < 1e-10


# ---------------------------------------------------------------- gaussian kernel

def test_gaussian_kernel_examples():
    pts = ([0, 1, 2], [0.0, 1.0, 2.0])
    assert abs(gaussian_kernel_smooth(pts, 0.5, at=1.0)[0] - 1.0) < 1e-10
    psi = np.array([1.0, math.exp(-2.0), math.exp(-8.0)])
    oracle = float(psi @ np.array([0.0, 1.0, 2.0]) / psi.sum())
    assert abs(gaussian_kernel_smooth(pts, 0.5, at=0.0)[0] - oracle) < 1e-10
    assert abs(oracle - 0.11975848544807298) < 1e-15


def test_gaussian_kernel_constant_and_single_sample():
    np.testing.assert_allclose(gaussian_kernel_smooth(([0, 5, 9], [0.2] * 3), 3.0), [0.2] * 3,
                               atol=1e-15)
    np.testing.assert_allclose(gaussian_kernel_smooth(([4], [0.7]), 1.0, at=[-10, 4, 50]),
                               [0.7] * 3, atol=1e-15)
    with pytest.raises(ConfigurationError):
        gaussian_kernel_smooth(([0], [1.0]), 0.0)


def test_gaussian_kernel_stable_for_tiny_bandwidth():
    out = gaussian_kernel_smooth(([0, 100], [0.1, 0.9]), 0.01, at=[1000.0])
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(0.9)


# ---------------------------------------------------------------- LOWESS

def wls_oracle(x, y, fraction):
    """Per point: weighted lstsq in raw coordinates on sqrt-weighted rows."""
    n = len(x)
    r = max(2, math.ceil(fraction * n))
    out = []
    for i in range(n):
        d = np.abs(x - x[i])
        idx = np.argsort(d, kind="stable")[:r]
        h = d[idx].max()
        w = (1 - np.clip(d[idx] / h, 0, 1) ** 3) ** 3
        A = np.column_stack([np.ones(r), x[idx]]) * np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(A, y[idx] * np.sqrt(w), rcond=None)
        out.append(coef[0] + coef[1] * x[i])
    return np.array(out)


def test_lowess_five_point_oracle():
    x = np.array([0.0, 1.0, 2.5, 4.0, 7.0])
    y = np.array([0.9, 0.7, 0.72, 0.4, 0.35])
    np.testing.assert_allclose(lowess_smooth((x, y), 0.8), wls_oracle(x, y, 0.8), atol=1e-8)


def test_lowess_noisy_oracle():
    x, y = noisy_curve(30, 4)
    np.testing.assert_allclose(lowess_smooth((x, y), 0.4), wls_oracle(x, y, 0.4), atol=1e-8)


def test_lowess_exact_on_affine_and_constant():
    x = np.array([0, 20, 40, 60, 100, 140, 200], float)
    np.testing.assert_allclose(lowess_smooth((x, 0.5 - 0.001 * x), 0.5), 0.5 - 0.001 * x,
                               atol=1e-10)
    np.testing.assert_allclose(lowess_smooth((x, np.full(7, 0.25)), 0.3), 0.25, atol=1e-15)
    delta = estimate_delta((x[:6], 0.5 - 0.001 * x[:6]),
                           SmootherConfig(kind="lowess", update_interval=20))
    assert abs(delta + 0.001) < 1e-10


def test_lowess_degenerate_neighbourhood_falls_back_to_mean():
    # the 2-point neighbourhood of the middle sample gives zero weight to its partner
    out = lowess_smooth(([0.0, 1.0, 2.0], [1.0, 2.0, 4.0]), 0.1)
    assert np.all(np.isfinite(out))
    with pytest.raises(InputError):
        lowess_smooth(([0, 1], [1.0, 2.0]), 0.5)


# ---------------------------------------------------------------- spline

def scipy_design(x, t):
    return BSpline.design_matrix(x, t, 3, extrapolate=False).toarray()


def test_basis_matches_scipy():
    t = clamped_knot_vector(20.0, 1000.0, 8)
    x = np.linspace(20, 1000, 77)
    ours = bspline_basis(x, t)
    assert ours.shape == (77, 10)
    np.testing.assert_allclose(ours, scipy_design(x, t), atol=1e-13)
    np.testing.assert_allclose(ours.sum(1), 1.0, atol=1e-13)


def test_basis_derivative_matches_scipy():
    t = clamped_knot_vector(0.0, 10.0, 5)
    x = np.linspace(0, 10, 41)
    for j in range(len(t) - 4):
        c = np.zeros(len(t) - 4)
        c[j] = 1.0
        np.testing.assert_allclose(bspline_basis(x, t, deriv=1)[:, j],
                                   BSpline(t, c, 3).derivative()(x), atol=1e-12)


def test_spline_matches_dense_normal_equations():
    x, y = noisy_curve(20, 7)
    fit = fit_smoothing_spline((x, y), 6, 1.0)
    t = clamped_knot_vector(x[0], x[-1], 6)
    psi = scipy_design(x, t)
    J = psi.shape[1]
    assert J == 8 == fit.n_basis
    # independent path: augmented least squares [psi; sqrt(lam) I] theta ~ [y; 0]
    A = np.vstack([psi, np.eye(J)])
    b = np.concatenate([y, np.zeros(J)])
    theta, *_ = np.linalg.lstsq(A, b, rcond=None)
    np.testing.assert_allclose(fit.theta, theta, atol=1e-8)
    residual = (psi.T @ psi + np.eye(J)) @ fit.theta - psi.T @ y
    assert np.max(np.abs(residual)) < 1e-8


def test_spline_reproduces_affine_and_cubic_at_zero_lambda():
    x = np.linspace(0, 100, 25)
    fit = fit_smoothing_spline((x, 0.8 - 0.004 * x), 6, 0.0)
    assert np.linalg.norm(fit(x) - (0.8 - 0.004 * x)) < 1e-8
    cubic = 1e-6 * (x - 30) ** 3 - 1e-3 * x + 0.5
    assert np.linalg.norm(fit_smoothing_spline((x, cubic), 6, 0.0)(x) - cubic) < 1e-8


def test_spline_theta_norm_decreases_over_lambda_grid():
    x, y = noisy_curve(20, 3)
    norms = [np.linalg.norm(fit_smoothing_spline((x, y), 6, lam).theta)
             for lam in (0, 0.1, 1, 10, 100)]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_spline_huge_lambda_shrinks_to_zero():
    x, y = noisy_curve(20, 3)
    assert np.max(np.abs(fit_smoothing_spline((x, y), 6, 1e12)(x))) < 1e-9


def test_spline_rank_error():
    with pytest.raises(RankError, match="lam"):
        fit_smoothing_spline(([0, 1, 2, 3], [0.5, 0.4, 0.3, 0.3]), 6, 0.0)
    fit_smoothing_spline(([0, 1, 2, 3], [0.5, 0.4, 0.3, 0.3]), 6, 0.1)


def test_spline_mean_slope_of_identity():
    x = np.linspace(0, 100, 30)
    fit = fit_smoothing_spline((x, x.copy()), 8, 0.0)
    assert abs(fit.mean_slope(0, 100) - 1.0) < 1e-6
    assert abs(fit.mean_slope(37.5, 81.0) - 1.0) < 1e-6


def test_spline_mean_slope_is_exact_integral():
    x, y = noisy_curve(30, 9)
    fit = fit_smoothing_spline((x, y), 8, 0.5)
    lo, hi = 210.0, 590.0
    assert abs(fit.mean_slope(lo, hi) - (fit(hi)[0] - fit(lo)[0]) / (hi - lo)) < 1e-12


# ---------------------------------------------------------------- estimate_delta

@pytest.mark.parametrize("kind", ["moving_average", "gaussian_kernel", "lowess", "spline"])
def test_estimate_delta_signs(kind):
    x = np.arange(1, 31) * 20.0
    down = 0.6 * np.exp(-x / 300) + 0.1
    cfg = SmootherConfig(kind=kind, lam=0.0 if kind == "spline" else 1.0)
    assert estimate_delta((x, down), cfg) < 0
    assert abs(estimate_delta((x, np.full(30, 0.3)), cfg)) < 1e-6


def test_estimate_delta_defers():
    cfg = SmootherConfig(kind="spline")
    x = np.arange(1, 31) * 20.0
    y = np.linspace(0.5, 0.2, 30)
    assert estimate_delta((x[:-1], y[:-1]), cfg) is None  # 580 is off-cadence
    assert estimate_delta((x[:5], y[:5]), cfg) is None    # too few samples for the basis
    assert estimate_delta((x[:10], y[:10]), cfg) is not None
    assert estimate_delta((x[:4], y[:4]), SmootherConfig(kind="moving_average")) is None


def test_estimate_delta_is_pure():
    x, y = noisy_curve(40, 5)
    curve = ErrorCurve.from_points(x, y)
    before = (list(curve.iterations), list(curve.errors))
    cfg = SmootherConfig()
    assert estimate_delta(curve, cfg) == estimate_delta(curve, cfg)
    assert (curve.iterations, curve.errors) == before


def test_default_spline_on_plateau_is_pulled_by_ridge():
    # the penalty shrinks every coefficient toward zero, so a flat curve is not
    # reproduced exactly when lam > 0; the bias stays small
    x = np.arange(1, 51) * 20.0
    d = estimate_delta((x, np.full(50, 0.3)), SmootherConfig())
    assert 0 < abs(d) < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.01, 0.01), st.floats(0.0, 1.0), st.integers(12, 40))
def test_smoothers_exact_on_affine(slope, icpt, n):
    x = np.arange(1, n + 1) * 20.0
    y = icpt + slope * (x - x[0])
    for kind in ("moving_average", "lowess"):
        cfg = SmootherConfig(kind=kind, update_interval=20)
        assert abs(estimate_delta((x, y), cfg) - slope) < 1e-10
    cfg = SmootherConfig(kind="spline", lam=0.0, update_interval=20)
    assert abs(estimate_delta((x, y), cfg) - slope) < 1e-9


def test_smooth_values_shapes():
    x, y = noisy_curve(12, 0)
    for kind in ("moving_average", "gaussian_kernel", "lowess", "spline"):
        out = smooth_values((x, y), SmootherConfig(kind=kind))
        assert out.shape == (12,) and np.all(np.isfinite(out))
    assert smooth_values((x[:3], y[:3]), SmootherConfig(kind="spline")) is None


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SmootherConfig(kind="fourier")
    with pytest.raises(ConfigurationError):
        SmootherConfig(lam=-1)
    with pytest.raises(ConfigurationError):
        SmootherConfig(update_interval=0)
