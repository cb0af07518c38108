"""Online error-curve recording and slope estimation.

Four smoothers turn the noisy dev-error curve into a slope estimate: a moving
average of first differences, a Nadaraya-Watson Gaussian kernel, single-pass
LOWESS, and a ridge-penalised cubic B-spline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, RankError, StateError

SMOOTHER_KINDS = ("moving_average", "gaussian_kernel", "lowess", "spline")


@dataclass
class ErrorCurve:
    iterations: list[int] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)

    def append(self, iteration: int, error: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise InputError(f"iteration {iteration} does not follow {self.iterations[-1]}")
        if not math.isfinite(error) or error < 0:
            raise InputError(f"error samples must be finite and >= 0, got {error}")
        self.iterations.append(int(iteration))
        self.errors.append(float(error))

    def __len__(self):
        return len(self.iterations)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.iterations, dtype=np.float64), np.asarray(self.errors)

    @classmethod
    def from_points(cls, xs, ys) -> "ErrorCurve":
        curve = cls()
        for x, y in zip(xs, ys):
            curve.append(int(x), float(y))
        return curve


@dataclass(frozen=True)
class SmootherConfig:
    kind: str = "spline"
    window: int = 5
    bandwidth: float | None = None      # None: two evaluation intervals
    lowess_fraction: float = 0.5
    knots: int = 8
    lam: float = 1.0
    update_interval: int = 100
    subinterval: int | None = None      # None: one update interval

    def __post_init__(self):
        if self.kind not in SMOOTHER_KINDS:
            raise ConfigurationError(f"smoother kind must be one of {SMOOTHER_KINDS}")
        if self.window < 1 or self.update_interval < 1 or self.knots < 2:
            raise ConfigurationError("window, update_interval must be >= 1 and knots >= 2")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigurationError("bandwidth must be positive")
        if not 0 < self.lowess_fraction <= 1:
            raise ConfigurationError("lowess_fraction must lie in (0, 1]")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")


def _as_xy(curve) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, ErrorCurve):
        return curve.arrays()
    x, y = curve
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------- moving average

def moving_avg_slope(curve, k: int) -> float:
    """Mean of the last ``k`` first differences, each per iteration."""
    x, y = _as_xy(curve)
    if k < 1:
        raise ConfigurationError(f"window must be >= 1, got {k}")
    if len(x) < k + 1:
        raise StateError(f"moving average over {k} differences needs {k + 1} samples, "
                         f"have {len(x)}")
    xs, ys = x[-(k + 1):], y[-(k + 1):]
    return float(np.mean(np.diff(ys) / np.diff(xs)))


# ---------------------------------------------------------------- gaussian kernel

def gaussian_kernel_smooth(curve, bandwidth: float, at=None) -> np.ndarray:
    """Nadaraya-Watson estimate with weights exp(-(x_hat - x_i)^2 / 2b^2)."""
    if not bandwidth > 0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    x, y = _as_xy(curve)
    if len(x) == 0:
        raise InputError("kernel smoothing needs at least one sample")
    at = x if at is None else np.atleast_1d(np.asarray(at, dtype=np.float64))
    logw = -((at[:, None] - x[None, :]) ** 2) / (2.0 * bandwidth ** 2)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return (w @ y) / w.sum(axis=1)


# ---------------------------------------------------------------- LOWESS

def tricube(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def lowess_smooth(curve, fraction: float) -> np.ndarray:
    """Local linear fit at every sample over its ceil(fraction * n) nearest neighbours.

    Distances are scaled by the largest distance inside the neighbourhood and
    weighted with the tricube kernel. A singular local fit falls back to the
    weighted mean.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    x, y = _as_xy(curve)
    n = len(x)
    if n < 3:
        raise InputError(f"LOWESS needs at least 3 samples, have {n}")
    r = max(2, int(math.ceil(fraction * n)))
    out = np.empty(n)
    for i in range(n):
        dist = np.abs(x - x[i])
        nearest = np.argsort(dist, kind="stable")[:r]
        h = dist[nearest].max()
        dx = x[nearest] - x[i]
        w = tricube(dx / h) if h > 0 else np.ones(r)
        sw, swx, swxx = w.sum(), (w * dx).sum(), (w * dx * dx).sum()
        swy, swxy = (w * y[nearest]).sum(), (w * dx * y[nearest]).sum()
        det = sw * swxx - swx * swx
        if det <= 1e-12 * max(sw * swxx, 1e-300):
            out[i] = swy / sw
        else:
            # intercept of the fit centred on x[i]
            out[i] = (swxx * swy - swx * swxy) / det
    return out


# ---------------------------------------------------------------- cubic B-splines

def clamped_knot_vector(lo: float, hi: float, n_knots: int, degree: int = 3) -> np.ndarray:
    inner = np.linspace(lo, hi, n_knots)
    return np.concatenate([[lo] * degree, inner, [hi] * degree])


def bspline_basis(x, knot_vector: np.ndarray, degree: int = 3, deriv: int = 0) -> np.ndarray:
    """Design matrix of B-spline basis functions (or their derivatives) at ``x``.

    Cox-de Boor recursion; the right end of the domain belongs to the last
    non-empty span so the basis is a partition of unity on the closed interval.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    t = knot_vector
    if deriv > 0:
        lower = bspline_basis(x, t, degree - 1, deriv - 1)
        n_funcs = len(t) - degree - 1
        out = np.zeros((len(x), n_funcs))
        for i in range(n_funcs):
            d1 = t[i + degree] - t[i]
            d2 = t[i + degree + 1] - t[i + 1]
            if d1 > 0:
                out[:, i] += degree / d1 * lower[:, i]
            if d2 > 0:
                out[:, i] -= degree / d2 * lower[:, i + 1]
        return out
    spans = len(t) - 1
    B = np.zeros((len(x), spans))
    last = max(i for i in range(spans) if t[i] < t[i + 1])
    for i in range(spans):
        if t[i] < t[i + 1]:
            B[:, i] = (x >= t[i]) & (x < t[i + 1])
    B[x == t[last + 1], last] = 1.0
    for k in range(1, degree + 1):
        nxt = np.zeros((len(x), spans - k))
        for i in range(spans - k):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                nxt[:, i] += (x - t[i]) / d1 * B[:, i]
            if d2 > 0:
                nxt[:, i] += (t[i + k + 1] - x) / d2 * B[:, i + 1]
        B = nxt
    return B


@dataclass
class SplineFit:
    knots: np.ndarray
    knot_vector: np.ndarray
    theta: np.ndarray
    lam: float
    degree: int = 3

    @property
    def n_basis(self) -> int:
        return len(self.theta)

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def __call__(self, x) -> np.ndarray:
        return bspline_basis(x, self.knot_vector, self.degree) @ self.theta

    def derivative(self, x) -> np.ndarray:
        return bspline_basis(x, self.knot_vector, self.degree, deriv=1) @ self.theta

    def mean_slope(self, lo: float, hi: float) -> float:
        """Average of the analytic derivative over [lo, hi].

        The derivative is a quadratic on each knot span, so two-point
        Gauss-Legendre per span integrates it exactly.
        """
        if hi <= lo:
            raise InputError(f"empty slope interval [{lo}, {hi}]")
        breaks = np.unique(np.concatenate([[lo, hi], self.knots[(self.knots > lo) & (self.knots < hi)]]))
        nodes = np.array([-1.0, 1.0]) / math.sqrt(3.0)
        total = 0.0
        for a, b in zip(breaks[:-1], breaks[1:]):
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            total += half * self.derivative(mid + half * nodes).sum()
        return total / (hi - lo)


def fit_smoothing_spline(curve, n_knots: int, lam: float) -> SplineFit:
    """Ridge-penalised least squares on a clamped uniform cubic B-spline basis.

    Solves (Psi^T Psi + lam I) theta = Psi^T y with knots spread uniformly
    over [first, last] sample position; the basis has n_knots + 2 functions.
    """
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    if n_knots < 2:
        raise ConfigurationError(f"need at least 2 knots, got {n_knots}")
    x, y = _as_xy(curve)
    if len(x) < 2 or x[-1] <= x[0]:
        raise InputError("spline fit needs at least two distinct sample positions")
    t = clamped_knot_vector(x[0], x[-1], n_knots)
    psi = bspline_basis(x, t)
    J = psi.shape[1]
    gram = psi.T @ psi + lam * np.eye(J)
    if lam == 0 and np.linalg.matrix_rank(psi) < J:
        raise RankError(f"unpenalised spline with {J} basis functions is singular on "
                        f"{len(x)} samples; use lam > 0 or fewer knots")
    theta = np.linalg.solve(gram, psi.T @ y)
    return SplineFit(knots=np.linspace(x[0], x[-1], n_knots), knot_vector=t, theta=theta,
                     lam=float(lam))


# ---------------------------------------------------------------- slope estimation

def _window_slope(x: np.ndarray, s: np.ndarray, lo: float) -> float:
    keep = x >= lo
    if keep.sum() < 2:
        keep = np.zeros_like(keep)
        keep[-2:] = True
    xs, ss = x[keep], s[keep]
    return float(np.mean(np.diff(ss) / np.diff(xs)))


def default_bandwidth(x: np.ndarray) -> float:
    return 2.0 * float(np.median(np.diff(x))) if len(x) > 1 else 1.0


def smooth_values(curve, config: SmootherConfig) -> np.ndarray | None:
    """Smoothed value at every sample, or None when the smoother cannot run yet."""
    x, y = _as_xy(curve)
    if len(x) == 0:
        return None
    if config.kind == "moving_average":
        k = min(config.window, len(y))
        return np.array([y[max(0, i - k + 1): i + 1].mean() for i in range(len(y))])
    if config.kind == "gaussian_kernel":
        return gaussian_kernel_smooth((x, y), config.bandwidth or default_bandwidth(x))
    if config.kind == "lowess":
        return lowess_smooth((x, y), config.lowess_fraction) if len(x) >= 3 else None
    if len(x) < config.knots + 2:
        return None
    return fit_smoothing_spline((x, y), config.knots, config.lam)(x)


def estimate_delta(curve, config: SmootherConfig) -> float | None:
    """Raw slope of the smoothed curve over the latest subinterval.

    Returns None (deferred) unless the newest sample sits on the update
    cadence and enough samples exist for the configured smoother.
    """
    x, y = _as_xy(curve)
    if len(x) < 2 or int(x[-1]) % config.update_interval != 0:
        return None
    n = config.subinterval or config.update_interval
    lo = x[-1] - n
    if config.kind == "moving_average":
        if len(x) < config.window + 1:
            return None
        return float(moving_avg_slope((x, y), config.window))
    if config.kind == "spline":
        if len(x) < config.knots + 2:
            return None
        fit = fit_smoothing_spline((x, y), config.knots, config.lam)
        return float(fit.mean_slope(max(lo, x[0]), x[-1]))
    smoothed = smooth_values((x, y), config)
    if smoothed is None:
        return None
    return float(_window_slope(x, smoothed, lo))
