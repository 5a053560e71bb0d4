"""Coincidence histograms and the correlation quantities derived from them.

Bins are half-open, ``[k*w - w/2, k*w + w/2)`` for k in ``-K..K`` with
``K = window // w``, so the zero-delay bin is centred on zero. Every ordered
pair (a, b) with ``t_b - t_a`` inside the outermost bins is counted.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .polarization import cascade_phase
from .stream import TimeTagStream

PAIR_BUDGET = 1 << 22


class CorrelationError(ValueError):
    pass


@dataclass
class CorrelationHistogram:
    bin_width_ps: int
    window_ps: int
    counts: np.ndarray
    total_a: int
    total_b: int
    duration_ps: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_width_ps <= 0:
            raise CorrelationError("bin width must be positive")
        if len(self.counts) != 2 * self.half_bins + 1:
            raise CorrelationError("histogram length does not match window and bin width")
        if np.any(self.counts < 0):
            raise CorrelationError("negative histogram counts")

    @property
    def half_bins(self) -> int:
        return self.window_ps // self.bin_width_ps

    @property
    def delays_ps(self) -> np.ndarray:
        k = np.arange(-self.half_bins, self.half_bins + 1)
        return k * float(self.bin_width_ps)

    @property
    def accidental_level(self) -> float:
        """Expected counts per bin for uncorrelated channels."""
        if self.duration_ps <= 0:
            return 0.0
        return self.total_a * self.total_b * self.bin_width_ps / self.duration_ps

    def same_grid(self, other: "CorrelationHistogram") -> bool:
        return self.bin_width_ps == other.bin_width_ps and self.half_bins == other.half_bins

    def __add__(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        """Merge histograms of disjoint data (counts, singles and durations add)."""
        if not self.same_grid(other):
            raise CorrelationError("cannot merge histograms on different delay grids")
        return CorrelationHistogram(self.bin_width_ps, self.window_ps, self.counts + other.counts,
                                    self.total_a + other.total_a, self.total_b + other.total_b,
                                    self.duration_ps + other.duration_ps)

    def to_curve(self) -> "CorrelationCurve":
        return CorrelationCurve(self.delays_ps, self.counts.astype(float), np.sqrt(self.counts))


@dataclass
class CorrelationCurve:
    """Values on a delay grid; undefined bins hold NaN."""

    delays_ps: np.ndarray
    values: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.delays_ps = np.asarray(self.delays_ps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (len(self.delays_ps) == len(self.values) == len(self.sigma)):
            raise CorrelationError("curve arrays must have equal length")
        if np.any(self.sigma[np.isfinite(self.sigma)] < 0):
            raise CorrelationError("negative sigma")

    def __len__(self):
        return len(self.values)

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def select(self, mask) -> "CorrelationCurve":
        return CorrelationCurve(self.delays_ps[mask], self.values[mask], self.sigma[mask])

    def between(self, t_min=-np.inf, t_max=np.inf) -> "CorrelationCurve":
        d = self.delays_ps
        return self.select((d >= t_min) & (d <= t_max))


# ---------------------------------------------------------------------------
# pair counting


def _window_bounds(w: int, k_max: int) -> tuple[int, int]:
    """Integer delay range [lo, hi) covered by bins -k_max..k_max."""
    half_span = (2 * k_max + 1) * w  # twice the half-width of the covered range
    lo = -(half_span // 2)  # ceil(-half_span / 2)
    hi = -(-half_span // 2)  # ceil(half_span / 2)
    return lo, hi


def _bin_index(dt: np.ndarray, w: int) -> np.ndarray:
    return (2 * dt + w) // (2 * w)


def _pair_counts(ta, tb, w: int, k_max: int, self_offset: int | None = None) -> np.ndarray:
    """Histogram of tb[j] - ta[i] for all in-window pairs.

    With ``self_offset`` set, ``ta[i]`` is the same record as ``tb[i + self_offset]``
    and only j > i is enumerated; each unordered pair then fills both k and -k.
    """
    nbins = 2 * k_max + 1
    out = np.zeros(nbins, np.int64)
    if len(ta) == 0 or len(tb) == 0:
        return out
    lo_dt, hi_dt = _window_bounds(w, k_max)
    hi = np.searchsorted(tb, ta + hi_dt, side="left")
    if self_offset is None:
        lo = np.searchsorted(tb, ta + lo_dt, side="left")
    else:
        lo = np.arange(len(ta)) + self_offset + 1
        hi = np.maximum(hi, lo)
    n = hi - lo
    cum = np.cumsum(n)
    start = 0
    while start < len(ta):
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + PAIR_BUDGET, side="right"))
        stop = max(stop, start + 1)
        counts = n[start:stop]
        total = int(counts.sum())
        if total:
            offsets = np.repeat(np.cumsum(counts) - counts, counts)
            j = np.arange(total) - offsets + np.repeat(lo[start:stop], counts)
            dt = tb[j] - np.repeat(ta[start:stop], counts)
            k = _bin_index(dt, w)
            out += np.bincount(k + k_max, minlength=nbins)
            if self_offset is not None:
                out += np.bincount(k_max - k, minlength=nbins)
        start = stop
    return out


def _channel_times(stream: TimeTagStream, channels) -> np.ndarray:
    chans = np.atleast_1d(np.asarray(channels)).tolist()
    missing = [c for c in chans if c not in stream.channel_map]
    if missing:
        raise CorrelationError(f"channels {missing} not present in stream")
    return stream.channel_times(chans)


def _prepare(stream, ch_a, ch_b, bin_width_ps, window_ps):
    stream.check_sorted()
    w = int(bin_width_ps)
    if w <= 0:
        raise CorrelationError("bin width must be positive")
    if window_ps < 0:
        raise CorrelationError("window must be non-negative")
    ta = _channel_times(stream, ch_a)
    same = set(np.atleast_1d(ch_a).tolist()) == set(np.atleast_1d(ch_b).tolist())
    tb = ta if same else _channel_times(stream, ch_b)
    return w, int(window_ps) // w, ta, tb, same


def cross_correlation(stream: TimeTagStream, ch_a, ch_b, bin_width_ps: int = 32,
                      window_ps: int = 50_000) -> CorrelationHistogram:
    """All-pairs coincidence histogram of ``t_b - t_a``.

    ``ch_a`` / ``ch_b`` may be single channels or sequences (their union is used).
    Identical channel sets give an autocorrelation without self-pairs in which
    each unordered pair is binned by ``|dt|`` and counted at both ``+k`` and
    ``-k``, so the histogram is exactly symmetric.
    """
    w, k_max, ta, tb, same = _prepare(stream, ch_a, ch_b, bin_width_ps, window_ps)
    counts = _pair_counts(ta, tb, w, k_max, 0 if same else None)
    return CorrelationHistogram(w, k_max * w, counts, len(ta), len(tb), stream.duration_ps)


def cross_correlation_segmented(stream: TimeTagStream, ch_a, ch_b, bin_width_ps: int = 32,
                                window_ps: int = 50_000, n_segments: int = 4,
                                workers: int | None = None) -> CorrelationHistogram:
    """Data-parallel :func:`cross_correlation`.

    The a-records are split into contiguous time segments; each segment is
    correlated against the b-records of its span widened by the window on both
    sides, and the integer partial histograms are summed.
    """
    w, k_max, ta, tb, same = _prepare(stream, ch_a, ch_b, bin_width_ps, window_ps)
    lo_dt, hi_dt = _window_bounds(w, k_max)
    edges = np.linspace(0, max(stream.duration_ps, int(ta[-1]) + 1 if len(ta) else 0), n_segments + 1)
    cuts = np.searchsorted(ta, edges[1:-1], side="left")
    bounds = list(zip(np.r_[0, cuts], np.r_[cuts, len(ta)]))

    def work(bound):
        a0, a1 = (int(x) for x in bound)
        if a1 <= a0:
            return np.zeros(2 * k_max + 1, np.int64)
        b0 = int(np.searchsorted(tb, ta[a0] + lo_dt, side="left"))
        b1 = int(np.searchsorted(tb, ta[a1 - 1] + hi_dt, side="left"))
        if same:
            b0 = a0
        return _pair_counts(ta[a0:a1], tb[b0:b1], w, k_max, (a0 - b0) if same else None)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(work, bounds))
    counts = np.sum(parts, axis=0) if parts else np.zeros(2 * k_max + 1, np.int64)
    return CorrelationHistogram(w, k_max * w, counts, len(ta), len(tb), stream.duration_ps)


def co_cross_histograms(stream: TimeTagStream, channels: dict, bin_width_ps: int = 32,
                        window_ps: int = 50_000) -> tuple[CorrelationHistogram, CorrelationHistogram]:
    """Co- and cross-polarized XX-X histograms from the four analyzer arms.

    ``channels`` maps ``xx_plus``, ``xx_minus``, ``x_plus``, ``x_minus`` to channel numbers.
    """
    def h(a, b):
        return cross_correlation(stream, channels[a], channels[b], bin_width_ps, window_ps)

    pp, mm = h("xx_plus", "x_plus"), h("xx_minus", "x_minus")
    pm, mp = h("xx_plus", "x_minus"), h("xx_minus", "x_plus")
    total_a = stream.count([channels["xx_plus"], channels["xx_minus"]])
    total_b = stream.count([channels["x_plus"], channels["x_minus"]])
    co = CorrelationHistogram(pp.bin_width_ps, pp.window_ps, pp.counts + mm.counts, total_a, total_b,
                              stream.duration_ps)
    cross = CorrelationHistogram(pp.bin_width_ps, pp.window_ps, pm.counts + mp.counts, total_a, total_b,
                                 stream.duration_ps)
    return co, cross


# ---------------------------------------------------------------------------
# derived curves


def normalize_g2(hist: CorrelationHistogram) -> CorrelationCurve:
    """g2 = counts / (N_a N_b w / T)."""
    if hist.total_a == 0 or hist.total_b == 0 or hist.duration_ps <= 0:
        raise CorrelationError("g2 normalization needs non-zero singles and duration")
    norm = hist.accidental_level
    return CorrelationCurve(hist.delays_ps, hist.counts / norm, np.sqrt(hist.counts) / norm)


def degree_of_correlation(co: CorrelationHistogram, cross: CorrelationHistogram) -> CorrelationCurve:
    """C = (co - cross)/(co + cross) per bin with binomial sigma sqrt((1 - C^2)/n).

    Bins with no coincidences are undefined (NaN).
    """
    if not co.same_grid(cross):
        raise CorrelationError("co and cross histograms use different delay grids")
    n = (co.counts + cross.counts).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (co.counts - cross.counts) / n
        sigma = np.sqrt(np.clip(1 - c**2, 0, None) / n)
    return CorrelationCurve(co.delays_ps, c, sigma)


def correlation_from_stream(stream: TimeTagStream, channels: dict, bin_width_ps: int = 32,
                            window_ps: int = 50_000) -> CorrelationCurve:
    return degree_of_correlation(*co_cross_histograms(stream, channels, bin_width_ps, window_ps))


@dataclass
class FidelityInputs:
    c_hv: CorrelationCurve
    c_da: CorrelationCurve
    c_lr: CorrelationCurve
    c_eld_era: CorrelationCurve
    c_ela_erd: CorrelationCurve
    fss_ueV: float

    def __post_init__(self):
        grid = self.c_hv.delays_ps
        for name, curve in self.curves().items():
            if len(curve) != len(grid) or not np.array_equal(curve.delays_ps, grid):
                raise CorrelationError(f"{name} is on a different delay grid")
            ok = curve.defined
            if np.any(np.abs(curve.values[ok]) > 1 + 3 * curve.sigma[ok] + 1e-12):
                raise CorrelationError(f"{name} has |C| beyond 1 + 3 sigma")

    def curves(self) -> dict[str, CorrelationCurve]:
        return {"c_hv": self.c_hv, "c_da": self.c_da, "c_lr": self.c_lr,
                "c_eld_era": self.c_eld_era, "c_ela_erd": self.c_ela_erd}

    @property
    def delays_ps(self) -> np.ndarray:
        return self.c_hv.delays_ps


def bell_fidelity(c_hv, c_da, c_lr, c_eld_era, c_ela_erd, chi):
    """Fidelity to (|HH> + e^{i chi}|VV>)/sqrt(2) from the five basis contrasts."""
    return 0.25 * (1 + c_hv + (c_da - c_lr) * np.cos(chi) + (c_eld_era - c_ela_erd) * np.sin(chi))


def fidelity_curve(inputs: FidelityInputs, mode="evolving") -> CorrelationCurve:
    """Fidelity per delay bin, to the evolving state (phase S*tau/hbar) or a static phase.

    ``mode`` is ``"evolving"`` or a float phase chi in radians.
    """
    if isinstance(mode, str):
        if mode != "evolving":
            raise ValueError(f"mode must be 'evolving' or a phase in radians, got {mode!r}")
        chi = cascade_phase(inputs.fss_ueV, inputs.delays_ps)
    else:
        chi = np.full(len(inputs.delays_ps), float(mode))
    c = inputs.curves()
    vals = bell_fidelity(*(c[k].values for k in c), chi)
    cos2, sin2 = np.cos(chi) ** 2, np.sin(chi) ** 2
    var = (c["c_hv"].sigma ** 2 + (c["c_da"].sigma ** 2 + c["c_lr"].sigma ** 2) * cos2
           + (c["c_eld_era"].sigma ** 2 + c["c_ela_erd"].sigma ** 2) * sin2)
    return CorrelationCurve(inputs.delays_ps, vals, 0.25 * np.sqrt(var))


class Peak(NamedTuple):
    value: float
    sigma: float
    delay_ps: float


def peak_fidelity(curve: CorrelationCurve) -> Peak:
    """Largest defined value at non-negative delay."""
    ok = curve.defined & (curve.delays_ps >= 0)
    if not ok.any():
        raise CorrelationError("no defined bins at non-negative delay")
    idx = np.flatnonzero(ok)
    i = idx[np.argmax(curve.values[idx])]
    return Peak(float(curve.values[i]), float(curve.sigma[i]), float(curve.delays_ps[i]))


CHSH_PLANES = {
    "DA-LR": ("c_da", "c_lr"),
    "HV-DA": ("c_hv", "c_da"),
    "HV-LR": ("c_hv", "c_lr"),
}


def chsh_parameter(inputs: FidelityInputs, plane: str = "DA-LR") -> CorrelationCurve:
    """S = sqrt(2) (|C_1| + |C_2|) for analyzers rotated within one Poincaré plane."""
    try:
        k1, k2 = CHSH_PLANES[plane.upper()]
    except KeyError:
        raise ValueError(f"unknown plane {plane!r}; expected one of {list(CHSH_PLANES)}") from None
    c = inputs.curves()
    c1, c2 = c[k1], c[k2]
    if not np.array_equal(c1.delays_ps, c2.delays_ps):
        raise CorrelationError("correlation curves use different delay grids")
    s = np.sqrt(2) * (np.abs(c1.values) + np.abs(c2.values))
    sigma = np.sqrt(2) * np.hypot(c1.sigma, c2.sigma)
    return CorrelationCurve(c1.delays_ps, s, sigma)
