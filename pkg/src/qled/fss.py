"""Quarter-wave-plate fine-structure-splitting spectroscopy.

Synthesizes polarization-resolved spectra, locates line centres and fits the
QWP energy-shift model for the splitting ``s`` and the setup rotation and
phase ``theta`` / ``phi``.

The model has two exact symmetries, (s, theta, phi, p) ~ (-s, theta + pi, phi, -p)
and (s, theta, phi, p) ~ (s, -theta, phi + pi, p). Fits report the
representative with s >= 0, 0 <= theta <= pi and 0 <= phi < 2 pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .units import FWHM_PER_SIGMA

SINGULAR = 1e-9
PARAM_NAMES = ("s_ueV", "theta_rad", "phi_rad", "epsilon_ueV", "p")


class FssError(ValueError):
    pass


class LineFitError(RuntimeError):
    pass


class AmbiguousLineError(LineFitError):
    pass


@dataclass(frozen=True)
class QwpModelParams:
    s_ueV: float
    theta_rad: float = 0.0
    phi_rad: float = 0.0
    p: float = 0.0
    epsilon_ueV: float = 0.0

    def __post_init__(self):
        if not abs(self.p) <= 1:
            raise FssError("polarization p must lie in [-1, 1]")

    def canonical(self) -> "QwpModelParams":
        s, th, ph, p = self.s_ueV, self.theta_rad, self.phi_rad, self.p
        if s < 0:
            s, th, p = -s, th + math.pi, -p
        th = math.remainder(th, 2 * math.pi)  # (-pi, pi]
        if th < 0:
            th, ph = -th, ph + math.pi
        ph = ph % (2 * math.pi)
        if ph >= 2 * math.pi:  # tiny negative inputs round up to 2*pi
            ph = 0.0
        return QwpModelParams(float(s), float(th), float(ph), float(p), float(self.epsilon_ueV))


def _numerator_denominator(chi, theta, phi, p):
    chi = np.asarray(chi, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    pattern = ct * (1 + np.cos(4 * chi)) + st * np.sin(4 * chi) * np.cos(phi) - 2 * st * np.sin(2 * chi) * np.sin(phi)
    return 2 * p + pattern, 2 + p * pattern


def qwp_energy_shift(chi_rad, params: QwpModelParams):
    """Energy deviation (ueV) from the mean transition energy at QWP angle ``chi_rad``."""
    num, den = _numerator_denominator(chi_rad, params.theta_rad, params.phi_rad, params.p)
    if np.any(np.abs(den) < SINGULAR):
        raise FssError("QWP model denominator vanishes (|p| too close to 1)")
    out = params.s_ueV / 2 * num / den
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class SpectralLine:
    """Emission line; ``qwp`` set means the line is FSS-split and shifts with the QWP angle."""

    center_ueV: float
    intensity: float
    fwhm_ueV: float
    qwp: QwpModelParams | None = None

    def __post_init__(self):
        if not self.intensity > 0:
            raise FssError("line intensity must be positive")
        if not self.fwhm_ueV > 0:
            raise FssError("line width must be positive")

    @property
    def polarization_behavior(self) -> str:
        return "unsplit" if self.qwp is None else "fss_split"

    def center_at(self, chi_rad: float) -> float:
        if self.qwp is None:
            return self.center_ueV
        return self.center_ueV + qwp_energy_shift(chi_rad, self.qwp)


@dataclass
class Spectrum:
    energy_ueV: np.ndarray
    counts: np.ndarray
    noisy: bool = False


def synth_spectrum(lines, chi_rad: float, resolution_ueV: float, seed=None,
                   energy_ueV=None, background: float = 0.0) -> Spectrum:
    """Sum of Gaussian lines broadened by a Gaussian spectrometer response.

    ``intensity`` is the peak height of the unbroadened line. With ``seed``
    given, Poisson shot noise is applied.
    """
    if not resolution_ueV > 0:
        raise FssError("resolution must be positive")
    lines = list(lines)
    if energy_ueV is None:
        if lines:
            widths = [math.hypot(line.fwhm_ueV, resolution_ueV) for line in lines]
            lo = min(line.center_ueV for line in lines) - 5 * max(widths)
            hi = max(line.center_ueV for line in lines) + 5 * max(widths)
        else:
            lo, hi = -5 * resolution_ueV, 5 * resolution_ueV
        energy_ueV = np.arange(lo, hi, resolution_ueV / 20)
    e = np.asarray(energy_ueV, dtype=float)
    model = np.full(e.shape, float(background))
    for line in lines:
        width = math.hypot(line.fwhm_ueV, resolution_ueV)
        height = line.intensity * line.fwhm_ueV / width  # area preserved by the convolution
        sig = width / FWHM_PER_SIGMA
        model += height * np.exp(-0.5 * ((e - line.center_at(chi_rad)) / sig) ** 2)
    if seed is None:
        return Spectrum(e, model)
    rng = np.random.default_rng(seed)
    return Spectrum(e, rng.poisson(model).astype(float), noisy=True)


def _gauss(e, height, center, sig, base):
    return base + height * np.exp(-0.5 * ((e - center) / sig) ** 2)


def fit_line_center(spectrum: Spectrum, window: tuple[float, float]) -> tuple[float, float]:
    """Centre and 1-sigma error of a Gaussian fit to the single line inside ``window``."""
    lo, hi = window
    sel = (spectrum.energy_ueV >= lo) & (spectrum.energy_ueV <= hi)
    e = spectrum.energy_ueV[sel]
    y = spectrum.counts[sel]
    if len(e) < 5 or not np.any(y > 0):
        raise LineFitError(f"no line found in window {window}")
    base0 = float(np.min(y))
    # light smoothing so shot noise on a line top cannot split it into tied maxima
    probe = gaussian_filter1d(y, 2.0) if spectrum.noisy else y
    peaks, _ = find_peaks(probe - probe.min(), prominence=0.5 * (np.max(probe) - probe.min()))
    if len(peaks) > 1:
        raise AmbiguousLineError(f"{len(peaks)} comparable peaks inside window {window}")
    i = int(peaks[0]) if len(peaks) else int(np.argmax(y))
    height0 = float(y[i] - base0)
    above = e[y - base0 > height0 / 2]
    sig0 = max((above.max() - above.min()) / FWHM_PER_SIGMA, np.diff(e).min()) if above.size > 1 else (hi - lo) / 10
    s = np.sqrt(np.maximum(y, 1.0)) if spectrum.noisy else np.ones_like(y)

    def resid(q):
        return (_gauss(e, *q) - y) / s

    res = least_squares(resid, [height0, e[i], sig0, base0], method="trf", x_scale="jac",
                        xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    if res.status <= 0 or not lo <= res.x[1] <= hi:
        raise LineFitError(f"Gaussian line fit failed in window {window}: {res.message}")
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    dof = max(len(e) - 4, 1)
    if not spectrum.noisy:
        cov *= 2 * res.cost / dof
    return float(res.x[1]), float(math.sqrt(max(cov[1, 1], 0.0)))


# ---------------------------------------------------------------------------
# QWP series and the FSS fit


@dataclass
class QwpSeries:
    chi_rad: np.ndarray
    delta_e_ueV: np.ndarray
    sigma_ueV: np.ndarray

    def __post_init__(self):
        self.chi_rad = np.asarray(self.chi_rad, dtype=float)
        self.delta_e_ueV = np.asarray(self.delta_e_ueV, dtype=float)
        self.sigma_ueV = np.asarray(self.sigma_ueV, dtype=float)
        if not (len(self.chi_rad) == len(self.delta_e_ueV) == len(self.sigma_ueV)):
            raise FssError("series columns must have equal length")
        if np.any(~(self.sigma_ueV > 0)):
            raise FssError("every point needs sigma > 0")

    def __len__(self):
        return len(self.chi_rad)

    def check_fittable(self):
        if len(self) < 8:
            raise FssError(f"need at least 8 QWP angles, got {len(self)}")
        if np.ptp(self.chi_rad) < math.pi * (1 - 1e-9) * (len(self) - 1) / len(self):
            raise FssError("QWP angles must span at least pi")


def synth_qwp_series(params: QwpModelParams, chi_rad, noise_ueV: float, rng=None) -> QwpSeries:
    """Model energies epsilon + dE(chi) with Gaussian noise of ``noise_ueV``."""
    chi = np.asarray(chi_rad, dtype=float)
    y = params.epsilon_ueV + qwp_energy_shift(chi, params)
    if noise_ueV > 0:
        rng = np.random.default_rng(rng)
        y = y + rng.normal(0.0, noise_ueV, len(chi))
    return QwpSeries(chi, y, np.full(len(chi), noise_ueV if noise_ueV > 0 else 1.0))


def measure_qwp_series(lines, chi_rad, resolution_ueV: float, window, seed=None,
                       reference_ueV: float | None = None) -> QwpSeries:
    """Spectrum-level QWP scan: synthesize at each angle and fit the line in ``window``."""
    centers, errs = [], []
    for k, chi in enumerate(np.asarray(chi_rad, dtype=float)):
        spec = synth_spectrum(lines, chi, resolution_ueV, None if seed is None else (seed, k))
        c, e = fit_line_center(spec, window)
        centers.append(c)
        errs.append(e)
    centers = np.asarray(centers)
    ref = np.mean(centers) if reference_ueV is None else reference_ueV
    errs = np.asarray(errs)
    errs[errs <= 0] = 1e-6
    return QwpSeries(chi_rad, centers - ref, errs)


@dataclass
class FssFit:
    params: QwpModelParams
    covariance: np.ndarray  # over (s, theta, phi, epsilon[, p])
    chi2: float
    dof: int
    resolved: bool = True
    s_upper_bound_ueV: float | None = None
    names: tuple = field(default=PARAM_NAMES[:4])

    def sigma(self, name: str) -> float:
        i = self.names.index(name)
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))

    def rows(self):
        """(parameter, estimate, sigma) rows."""
        if not self.resolved:
            return [("fss_unresolved_upper_bound_ueV", self.s_upper_bound_ueV, float("nan"))]
        return [(n, getattr(self.params, n), self.sigma(n)) for n in self.names]


def _linear_fit(series: QwpSeries):
    """Exact p = 0 solution: the model is linear in (1, cos4x, sin4x, sin2x)."""
    x = series.chi_rad
    w = 1 / series.sigma_ueV
    design = np.column_stack([np.ones_like(x), np.cos(4 * x), np.sin(4 * x), np.sin(2 * x)])
    coef, *_ = np.linalg.lstsq(design * w[:, None], series.delta_e_ueV * w, rcond=None)
    cov = np.linalg.pinv((design * w[:, None]).T @ (design * w[:, None]))
    resid = (design @ coef - series.delta_e_ueV) * w
    return coef, cov, float(resid @ resid)


def _params_from_coef(coef) -> QwpModelParams:
    a, b, c = coef[1], coef[2], -coef[3] / 2
    quarter = math.sqrt(a * a + b * b + c * c)
    if quarter == 0:
        return QwpModelParams(0.0, 0.0, 0.0, 0.0, float(coef[0]))
    theta = math.atan2(math.hypot(b, c), a)
    phi = math.atan2(c, b) % (2 * math.pi)
    return QwpModelParams(4 * quarter, theta, phi, 0.0, float(coef[0] - a))


def fit_fss(series: QwpSeries, fit_p: bool = False, grid: int = 8, significance: float = 0.01) -> FssFit:
    """Weighted least-squares fit of the QWP model to a measured series.

    With p fixed at zero the model is an exact reparametrization of a linear
    model, whose solution is the global optimum and seeds the nonlinear
    refinement. With ``fit_p`` a ``grid`` x ``grid`` multi-start over
    (theta, phi) is used as well. If the splitting is not significant at the
    ``significance`` level the fit is returned with ``resolved=False`` and a
    95% upper bound on s.
    """
    series.check_fittable()
    x, y, sig = series.chi_rad, series.delta_e_ueV, series.sigma_ueV
    coef, coef_cov, chi2_lin = _linear_fit(series)

    w = 1 / sig
    ybar = np.sum(y * w**2) / np.sum(w**2)
    chi2_const = float(np.sum(((y - ybar) * w) ** 2))
    if chi2_const - chi2_lin < stats.chi2.ppf(1 - significance, 3):
        # covariance of (a, b, c) with c = -coef[3] / 2
        jac = np.diag([1.0, 1.0, -0.5])
        abc_cov = jac @ coef_cov[1:, 1:] @ jac.T
        norm = math.sqrt(coef[1] ** 2 + coef[2] ** 2 + (coef[3] / 2) ** 2)
        spread = math.sqrt(stats.chi2.ppf(0.95, 3) * np.linalg.eigvalsh(abc_cov).max())
        return FssFit(QwpModelParams(0.0, 0.0, 0.0, 0.0, float(ybar)), np.full((4, 4), np.nan),
                      chi2_const, len(x) - 1, resolved=False, s_upper_bound_ueV=4 * (norm + spread))

    start = _params_from_coef(coef)
    names = PARAM_NAMES if fit_p else PARAM_NAMES[:4]

    def unpack(q):
        return QwpModelParams(q[0], q[1], q[2], q[4] if fit_p else 0.0, q[3])

    def resid(q):
        num, den = _numerator_denominator(x, q[1], q[2], q[4] if fit_p else 0.0)
        return (q[3] + q[0] / 2 * num / den - y) * w

    starts = [[start.s_ueV, start.theta_rad, start.phi_rad, start.epsilon_ueV] + ([0.0] if fit_p else [])]
    if fit_p:
        for th in np.arange(grid) * math.pi / grid:
            for ph in np.arange(grid) * 2 * math.pi / grid:
                starts.append([start.s_ueV, th, ph, start.epsilon_ueV, 0.0])
    lower = [-np.inf] * 4 + ([-1 + 1e-6] if fit_p else [])
    upper = [np.inf] * 4 + ([1 - 1e-6] if fit_p else [])

    best = None
    for q0 in starts:
        res = least_squares(resid, q0, bounds=(lower, upper), method="trf", x_scale="jac",
                            xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=5000)
        if res.status > 0 and (best is None or res.cost < best.cost):
            best = res
    if best is None:
        raise FssError("QWP model fit did not converge")

    raw = unpack(best.x)
    canon = raw.canonical()
    cov = np.linalg.pinv(best.jac.T @ best.jac)
    # covariance follows the sign flips applied by canonicalization
    flip = np.ones(len(names))
    if raw.s_ueV < 0:
        flip[0] = -1
        if fit_p:
            flip[4] = -1
    th = math.remainder(raw.theta_rad + (math.pi if raw.s_ueV < 0 else 0.0), 2 * math.pi)
    if th < 0:
        flip[1] = -flip[1]
    cov = cov * np.outer(flip, flip)
    return FssFit(canon, cov, float(2 * best.cost), len(x) - len(names), names=names)


def read_series_csv(path) -> QwpSeries:
    data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
    missing = {"chi_rad", "delta_e_ueV", "sigma_ueV"} - set(data.dtype.names or ())
    if missing:
        raise FssError(f"{path}: missing columns {sorted(missing)}")
    return QwpSeries(data["chi_rad"], data["delta_e_ueV"], data["sigma_ueV"])


def write_series_csv(path, series: QwpSeries):
    with open(path, "w", newline="") as fh:
        fh.write("chi_rad,delta_e_ueV,sigma_ueV\n")
        for row in zip(series.chi_rad, series.delta_e_ueV, series.sigma_ueV):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

