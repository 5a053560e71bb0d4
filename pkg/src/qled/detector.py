"""Single-photon detector chain: loss, Gaussian jitter, TDC binning, dark counts, dead time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stream import FLAG_CLAMPED, FLAG_DARK, TimeTagStream, merge_sorted
from .units import FWHM_PER_SIGMA, PS_PER_S


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.5
    jitter_fwhm_ps: float = 64.0
    dark_rate_hz: float = 100.0
    dead_time_ps: float = 0.0
    time_bin_ps: float = 1.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 0 <= self.efficiency <= 1:
            out.append("efficiency must lie in [0, 1]")
        if not self.jitter_fwhm_ps >= 0:
            out.append("jitter_fwhm_ps must be >= 0")
        if not self.dark_rate_hz >= 0:
            out.append("dark_rate_hz must be >= 0")
        if not self.dead_time_ps >= 0:
            out.append("dead_time_ps must be >= 0")
        if not self.time_bin_ps > 0:
            out.append("time_bin_ps must be > 0")
        return out

    @property
    def jitter_sigma_ps(self) -> float:
        return self.jitter_fwhm_ps / FWHM_PER_SIGMA


def quantize(times_ps, time_bin_ps: float) -> np.ndarray:
    """Floor to the TDC bin grid, returned as integer picoseconds."""
    t = np.asarray(times_ps, dtype=float)
    if time_bin_ps == 1:
        return np.floor(t).astype(np.int64)
    return (np.floor(t / time_bin_ps) * time_bin_ps).astype(np.int64)


def dead_time_filter(times: np.ndarray, dead_time_ps: float) -> np.ndarray:
    """Boolean keep-mask for sorted ``times`` under a non-paralyzable dead time."""
    keep = np.ones(len(times), dtype=bool)
    if dead_time_ps <= 0 or len(times) < 2:
        return keep
    gaps = np.diff(times)
    # a record whose gap to its predecessor is >= dead time always survives,
    # so only runs of short gaps need sequential treatment
    short = np.flatnonzero(gaps < dead_time_ps) + 1
    if short.size == 0:
        return keep
    last_kept = None
    prev_idx = -2
    for i in short:
        if i != prev_idx + 1 or last_kept is None:
            # start of a new run: the record before it is kept
            last_kept = times[i - 1]
        if times[i] - last_kept < dead_time_ps:
            keep[i] = False
        else:
            last_kept = times[i]
        prev_idx = i
    return keep


def detect_channel(times_ps, model: DetectorModel, duration_ps: int, rng: np.random.Generator,
                   flags=None) -> tuple[np.ndarray, np.ndarray]:
    """Pass ideal photon arrival times through one detector.

    Returns sorted integer timestamps in [0, duration_ps) and their flags.
    """
    times = np.asarray(times_ps, dtype=float)
    flags = np.zeros(len(times), np.uint8) if flags is None else np.asarray(flags, np.uint8)
    survive = rng.random(len(times)) < model.efficiency
    times, flags = times[survive], flags[survive]
    if model.jitter_fwhm_ps > 0:
        times = times + rng.normal(0.0, model.jitter_sigma_ps, len(times))
    negative = times < 0
    flags = flags | np.where(negative, FLAG_CLAMPED, 0).astype(np.uint8)
    stamps = quantize(np.where(negative, 0.0, times), model.time_bin_ps)

    n_dark = rng.poisson(model.dark_rate_hz * duration_ps / PS_PER_S) if duration_ps > 0 else 0
    dark = quantize(rng.random(n_dark) * duration_ps, model.time_bin_ps)

    stamps = np.concatenate([stamps, dark])
    flags = np.concatenate([flags, np.full(n_dark, FLAG_DARK, np.uint8)])
    inside = stamps < duration_ps
    stamps, flags = stamps[inside], flags[inside]
    order = np.argsort(stamps, kind="stable")
    stamps, flags = stamps[order], flags[order]
    keep = dead_time_filter(stamps, model.dead_time_ps)
    return stamps[keep], flags[keep]


def apply_detector(clicks, model: DetectorModel, duration_ps: int, rng: np.random.Generator,
                   channel: int = 0, label: str | None = None) -> TimeTagStream:
    """Single-channel detector chain producing a :class:`TimeTagStream`.

    ``clicks`` is a sequence of ideal arrival times (ps) or of objects with a
    ``time_ps`` attribute.
    """
    times = [getattr(c, "time_ps", c) for c in clicks]
    stamps, flags = detect_channel(np.asarray(times, dtype=float), model, duration_ps, rng)
    channels = np.full(len(stamps), channel, np.uint16)
    return merge_sorted(stamps, channels, flags, duration_ps, {channel: label or f"ch{channel}"})


def apply_detectors(per_channel: dict[int, tuple[np.ndarray, np.ndarray]], models: dict[int, DetectorModel],
                    duration_ps: int, rng: np.random.Generator, channel_map: dict[int, str]) -> TimeTagStream:
    """Run every channel through its detector, in ascending channel order, and merge."""
    ts, chs, fls = [], [], []
    for ch in sorted(models):
        times, flags = per_channel.get(ch, (np.empty(0), np.empty(0, np.uint8)))
        stamps, out_flags = detect_channel(times, models[ch], duration_ps, rng, flags)
        ts.append(stamps)
        fls.append(out_flags)
        chs.append(np.full(len(stamps), ch, np.uint16))
    if not ts:
        return TimeTagStream.empty(duration_ps, channel_map)
    return merge_sorted(np.concatenate(ts), np.concatenate(chs), np.concatenate(fls), duration_ps, channel_map)
