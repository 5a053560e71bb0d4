"""Weighted nonlinear least-squares fits of correlation curves."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .correlator import CorrelationCurve, CorrelationHistogram

LN2 = math.log(2)


class FitError(RuntimeError):
    """Fit did not converge or the data cannot support the model."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual cost {residual:.4g})")
        self.residual = residual


def _clean_sigma(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float).copy()
    positive = sigma[np.isfinite(sigma) & (sigma > 0)]
    floor = positive.min() if positive.size else 1.0
    sigma[~(np.isfinite(sigma) & (sigma > 0))] = floor
    return sigma


def _covariance(jac: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(jac.T @ jac)


def _solve(residuals, p0, bounds=(-np.inf, np.inf), max_nfev=2000, x_scale="jac"):
    res = least_squares(residuals, p0, bounds=bounds, method="trf", x_scale=x_scale,
                        xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"least squares did not converge: {res.message}", 2 * res.cost)
    return res


@dataclass
class GaussianDecayFit:
    amplitude: float
    hwhm_ps: float
    covariance: np.ndarray
    floor: float
    chi2: float
    dof: int
    degenerate: bool

    @property
    def hwhm_sigma_ps(self) -> float:
        return float(math.sqrt(max(self.covariance[1, 1], 0.0)))

    def __call__(self, t):
        return gaussian_decay(t, self.amplitude, self.hwhm_ps, self.floor)


def gaussian_decay(t, amplitude, hwhm_ps, floor=0.25):
    return floor + (amplitude - floor) * np.exp(-LN2 * (np.asarray(t) / hwhm_ps) ** 2)


def fit_gaussian_decay(curve: CorrelationCurve, floor: float = 0.25, t_max: float | None = None) -> GaussianDecayFit:
    """Fit ``floor + (A - floor) exp(-ln2 (t/w)^2)`` to the defined bins at t >= 0.

    Returns the peak value ``A``, the half width at half maximum ``w`` and their
    covariance. A curve without a resolvable excess over ``floor`` is returned
    with ``degenerate=True``.
    """
    ok = curve.defined & (curve.delays_ps >= 0)
    if t_max is not None:
        ok &= curve.delays_ps <= t_max
    t = curve.delays_ps[ok]
    y = curve.values[ok]
    if len(t) < 5:
        raise FitError(f"need at least 5 defined bins, got {len(t)}")
    s = _clean_sigma(curve.sigma[ok])

    a0 = float(np.max(y[: max(3, len(y) // 20)]))
    half = floor + (a0 - floor) / 2
    below = np.flatnonzero(y < half) if a0 > floor else np.array([], int)
    w0 = float(t[below[0]]) if below.size and t[below[0]] > 0 else float(t[-1] / 2 or 1.0)
    w0 = max(w0, float(np.min(np.diff(t))) if len(t) > 1 else 1.0)

    def resid(p):
        return (gaussian_decay(t, p[0], p[1], floor) - y) / s

    res = _solve(resid, [a0, w0], bounds=([-np.inf, 1e-9], [np.inf, np.inf]))
    cov = _covariance(res.jac)
    amp, w = (float(v) for v in res.x)
    amp_sigma = math.sqrt(max(cov[0, 0], 0.0))
    degenerate = abs(amp - floor) < 3 * amp_sigma or not np.isfinite(cov).all() or cov[1, 1] <= 0
    return GaussianDecayFit(amp, w, cov, floor, float(2 * res.cost), len(t) - 2, bool(degenerate))


@dataclass
class ExponentialDecayFit:
    tau_ps: float
    amplitude: float
    floor: float
    covariance: np.ndarray  # over (amplitude, tau_ps, floor)
    chi2: float
    dof: int

    @property
    def tau_sigma_ps(self) -> float:
        return float(math.sqrt(max(self.covariance[1, 1], 0.0)))


def fit_exponential_decay(hist: CorrelationHistogram, fit_range: tuple[float, float]) -> ExponentialDecayFit:
    """Fit ``floor + A exp(-t/tau)`` to histogram counts with Poisson weights.

    The accidental floor estimated from the singles seeds the fit and gates it:
    at least five bins in ``fit_range`` must rise 3 sigma above it.
    """
    t_min, t_max = fit_range
    d = hist.delays_ps
    sel = (d >= t_min) & (d <= t_max)
    t = d[sel]
    y = hist.counts[sel].astype(float)
    if len(t) < 5:
        raise FitError(f"fit range {fit_range} holds fewer than 5 bins")
    acc = hist.accidental_level
    above = y > acc + 3 * math.sqrt(max(acc, 1.0))
    if np.count_nonzero(above) < 5:
        raise FitError("fewer than 5 bins rise above the accidental floor")
    s = np.sqrt(np.maximum(y, 1.0))

    excess = y - acc
    pos = excess > 0
    slope = np.polyfit(t[pos], np.log(excess[pos]), 1, w=np.sqrt(excess[pos]))[0] if pos.sum() >= 2 else -1 / (t[-1] - t[0])
    tau0 = -1 / slope if slope < 0 else (t[-1] - t[0]) / 3
    amp0 = float(max(excess[0], 1.0)) * math.exp(t[0] / tau0)

    def resid(p):
        return (p[2] + p[0] * np.exp(-t / p[1]) - y) / s

    res = _solve(resid, [amp0, tau0, acc], bounds=([0, 1e-6, -np.inf], [np.inf, np.inf, np.inf]))
    cov = _covariance(res.jac)
    amp, tau, floor = (float(v) for v in res.x)
    if tau > 10 * (t[-1] - t[0]) or not np.isfinite(cov).all():
        raise FitError("decay constant unresolved within the fit range", 2 * res.cost)
    return ExponentialDecayFit(tau, amp, floor, cov, float(2 * res.cost), len(t) - 3)


@dataclass
class OscillationFit:
    period_ps: float
    amplitude: float
    damping_ps: float
    phase: float
    offset: float
    covariance: np.ndarray  # over (amplitude, damping_ps, period_ps, phase, offset)

    @property
    def period_sigma_ps(self) -> float:
        return float(math.sqrt(max(self.covariance[2, 2], 0.0)))


def damped_cosine(t, amplitude, damping_ps, period_ps, phase, offset):
    t = np.asarray(t, dtype=float)
    return offset + amplitude * np.exp(-t / damping_ps) * np.cos(2 * np.pi * t / period_ps + phase)


def fit_damped_oscillation(curve: CorrelationCurve, t_min: float = 0.0, t_max: float | None = None) -> OscillationFit:
    """Fit an exponentially damped cosine; the period is seeded from the periodogram peak."""
    ok = curve.defined & (curve.delays_ps >= t_min)
    if t_max is not None:
        ok &= curve.delays_ps <= t_max
    t = curve.delays_ps[ok]
    y = curve.values[ok]
    if len(t) < 8:
        raise FitError("need at least 8 defined bins for an oscillation fit")
    s = _clean_sigma(curve.sigma[ok])

    dt = float(np.median(np.diff(t)))
    grid = np.arange(t[0], t[-1] + dt / 2, dt)
    yg = np.interp(grid, t, y - np.mean(y))
    spec = np.abs(np.fft.rfft(yg * np.hanning(len(yg)), n=8 * len(yg)))
    freqs = np.fft.rfftfreq(8 * len(yg), dt)
    spec[freqs < 2 / (t[-1] - t[0])] = 0
    period0 = 1 / freqs[int(np.argmax(spec))]
    amp0 = float(np.sqrt(2) * np.std(y))
    span = t[-1] - t[0]

    best = None
    for phase0 in np.linspace(0, 2 * np.pi, 4, endpoint=False):
        def resid(p):
            return (damped_cosine(t, *p) - y) / s
        try:
            res = _solve(resid, [amp0, span / 2, period0, phase0, float(np.mean(y))],
                         bounds=([0, 1e-6, dt, -np.inf, -np.inf], [np.inf, np.inf, np.inf, np.inf, np.inf]))
        except FitError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitError("oscillation fit did not converge from any start")
    amp, damp, period, phase, off = (float(v) for v in best.x)
    return OscillationFit(period, amp, damp, math.remainder(phase, 2 * np.pi), off, _covariance(best.jac))
