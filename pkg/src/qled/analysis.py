"""Basis-set analysis: five basis runs -> correlation curves -> fidelity summary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import polarization as pol
from .correlator import (
    CorrelationCurve,
    CorrelationError,
    FidelityInputs,
    Peak,
    co_cross_histograms,
    degree_of_correlation,
    fidelity_curve,
    peak_fidelity,
)
from .fitting import ExponentialDecayFit, FitError, GaussianDecayFit, fit_exponential_decay, fit_gaussian_decay
from .stream import TimeTagStream


class MissingBasisError(KeyError):
    def __init__(self, found, expected):
        self.found = sorted(found)
        self.expected = list(expected)
        missing = [b for b in self.expected if b not in found]
        super().__init__(f"missing basis runs {missing}; found {self.found}, expected {self.expected}")

    def __str__(self):
        return self.args[0]


@dataclass
class BasisSetAnalysis:
    inputs: FidelityInputs
    fidelity: CorrelationCurve
    peak: Peak
    peak_window_ps: tuple[float, float]
    x_decay: ExponentialDecayFit | None
    gaussian: GaussianDecayFit | None

    def significance_above(self, limit: float = 0.5) -> float:
        """Number of standard deviations by which the peak exceeds ``limit``."""
        if not self.peak.sigma > 0:
            return float("inf") if self.peak.value > limit else float("-inf")
        return (self.peak.value - limit) / self.peak.sigma


def basis_correlations(runs: dict[str, TimeTagStream], channels: dict, bin_width_ps: int = 32,
                       window_ps: int = 50_000):
    """Degree-of-correlation curve per basis plus the summed hv co+cross histogram."""
    missing = [b for b in pol.BASIS_ORDER if b not in runs]
    if missing:
        raise MissingBasisError(runs.keys(), pol.BASIS_ORDER)
    curves = {}
    total = None
    for name in pol.BASIS_ORDER:
        co, cross = co_cross_histograms(runs[name], channels, bin_width_ps, window_ps)
        curves[name] = degree_of_correlation(co, cross)
        if name == "hv":
            total = co + cross
    return curves, total


def analyze_basis_set(runs: dict[str, TimeTagStream], channels: dict, fss_ueV: float,
                      mode="evolving", bin_width_ps: int = 32, window_ps: int = 50_000,
                      peak_window_ps: float | None = None) -> BasisSetAnalysis:
    """Fidelity curve, peak and decay fits for one five-basis measurement set.

    The peak is searched over ``[0, peak_window_ps]``. By default the window
    is the exciton decay time fitted to the hv coincidence histogram, so the
    search stays where true coincidences dominate; without a usable fit the
    whole non-negative axis is searched.
    """
    curves, total = basis_correlations(runs, channels, bin_width_ps, window_ps)
    inputs = FidelityInputs(curves["hv"], curves["da"], curves["lr"], curves["elderra"],
                            curves["elaerd"], fss_ueV)
    fid = fidelity_curve(inputs, mode)

    x_decay = None
    try:
        x_decay = fit_exponential_decay(total, (0.0, float(window_ps)))
    except FitError:
        pass
    if peak_window_ps is None:
        peak_window_ps = x_decay.tau_ps if x_decay is not None else float("inf")
    limited = fid.select(fid.delays_ps <= peak_window_ps)
    try:
        peak = peak_fidelity(limited)
    except CorrelationError:
        peak = peak_fidelity(fid)

    gaussian = None
    try:
        gaussian = fit_gaussian_decay(fid)
    except FitError:
        pass
    return BasisSetAnalysis(inputs, fid, peak, (0.0, float(peak_window_ps)), x_decay, gaussian)


def parse_mode(text: str):
    """``"evolving"`` or ``"chi=<radians>"`` -> value accepted by :func:`fidelity_curve`."""
    text = text.strip()
    if text == "evolving":
        return "evolving"
    key, sep, value = text.partition("=")
    if sep and key.strip() == "chi":
        try:
            return float(value)
        except ValueError:
            pass
    raise ValueError(f"mode must be 'evolving' or 'chi=<radians>', got {text!r}")
