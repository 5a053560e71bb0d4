"""End-to-end stream synthesis: cascade source -> polarization analyzers -> detectors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import polarization as pol
from .cascade import (
    CascadeParams,
    TemperatureModel,
    params_at_temperature,
    sample_cascades_until,
    sample_outcomes,
)
from .detector import DetectorModel, apply_detectors
from .stream import FLAG_POISSON, TimeTagStream

ARMS = ("xx_plus", "xx_minus", "x_plus", "x_minus")
DEFAULT_CHANNELS = {"xx_plus": 0, "xx_minus": 1, "x_plus": 2, "x_minus": 3}


class ScenarioError(ValueError):
    """Invalid scenario; ``problems`` lists every offending field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Scenario:
    source: CascadeParams = field(default_factory=CascadeParams)
    detectors: dict = field(default_factory=lambda: {arm: DetectorModel() for arm in ARMS})
    channels: dict = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    basis_xx: str = "hv"
    basis_x: str = "hv"
    duration_ps: int = 10**11
    seed: int | None = None
    temperature: TemperatureModel | None = None
    temperature_K: float | None = None

    def problems(self) -> list[str]:
        out = []
        for arm in ARMS:
            if arm not in self.detectors:
                out.append(f"detector.{arm}: missing detector for arm")
            if arm not in self.channels:
                out.append(f"detector.{arm}.channel: missing channel assignment")
        chans = [self.channels[a] for a in ARMS if a in self.channels]
        if len(set(chans)) != len(chans):
            out.append("detector.*.channel: arms must use distinct channels")
        if any(not 0 <= c <= 255 for c in chans):
            out.append("detector.*.channel: channels must lie in 0..255")
        for key, name in (("measurement.basis_xx", self.basis_xx), ("measurement.basis_x", self.basis_x)):
            try:
                pol.basis(name)
            except KeyError as exc:
                out.append(f"{key}: {exc.args[0]}")
        if self.duration_ps < 0:
            out.append("measurement.duration_s: must be >= 0")
        if self.seed is None:
            out.append("measurement.seed: a seed is required")
        elif not 0 <= self.seed < 2**64:
            out.append("measurement.seed: must be an unsigned 64-bit integer")
        if self.temperature_K is not None:
            if self.temperature is None:
                out.append("temperature: table required to simulate at a set temperature")
            else:
                try:
                    self.effective_source()
                except ValueError as exc:
                    out.append(f"temperature: {exc}")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ScenarioError(problems)
        for arm in ARMS:
            det = self.detectors[arm]
            if 0 < det.dead_time_ps < det.time_bin_ps:
                warnings.warn(f"detector.{arm}: dead_time_ps below time_bin_ps has no effect", stacklevel=3)

    def effective_source(self) -> CascadeParams:
        if self.temperature_K is None:
            return self.source
        return self.source.with_overrides(**params_at_temperature(self.temperature, self.temperature_K))

    def with_basis(self, name: str) -> "Scenario":
        b = pol.basis(name).name
        return replace(self, basis_xx=b, basis_x=b)

    def channel_map(self) -> dict[int, str]:
        return {self.channels[arm]: arm for arm in ARMS}


def stream_seed(scenario: Scenario, seed: int) -> np.random.SeedSequence:
    """Seed material: user seed plus the basis pair, so basis runs are independent."""
    bxx = pol.BASIS_ORDER.index(pol.basis(scenario.basis_xx).name)
    bx = pol.BASIS_ORDER.index(pol.basis(scenario.basis_x).name)
    return np.random.SeedSequence([int(seed), bxx, bx])


def simulate_stream(scenario: Scenario, seed: int | None = None) -> TimeTagStream:
    """Deterministic time-tag stream for ``scenario`` (``seed`` overrides ``scenario.seed``)."""
    if seed is not None:
        scenario = replace(scenario, seed=int(seed))
    scenario.validate()
    chmap = scenario.channel_map()
    duration = int(scenario.duration_ps)
    if duration == 0:
        return TimeTagStream.empty(0, chmap)

    params = scenario.effective_source()
    bxx, bx = pol.basis(scenario.basis_xx), pol.basis(scenario.basis_x)
    rng = np.random.default_rng(stream_seed(scenario, scenario.seed))

    batch = sample_cascades_until(params, rng, duration)
    outcome = sample_outcomes(params, batch, bxx, bx, rng)
    xx_arm = outcome // 2
    x_arm = outcome % 2
    xx_time = batch.xx_time_ps
    x_time = batch.x_time_ps
    xx_flags = np.zeros(len(batch), np.uint8)
    x_flags = np.zeros(len(batch), np.uint8)

    if params.poisson_fraction > 0:
        xx_time, xx_arm, xx_flags = _relocate(xx_time, xx_arm, xx_flags, params.poisson_fraction, duration, rng)
        x_time, x_arm, x_flags = _relocate(x_time, x_arm, x_flags, params.poisson_fraction, duration, rng)

    per_channel = {}
    for arm, times, which, flags in (
        ("xx_plus", xx_time, xx_arm == 0, xx_flags),
        ("xx_minus", xx_time, xx_arm == 1, xx_flags),
        ("x_plus", x_time, x_arm == 0, x_flags),
        ("x_minus", x_time, x_arm == 1, x_flags),
    ):
        per_channel[scenario.channels[arm]] = (times[which], flags[which])
    models = {scenario.channels[arm]: scenario.detectors[arm] for arm in ARMS}
    return apply_detectors(per_channel, models, duration, rng, chmap)


def _relocate(times, arms, flags, fraction, duration, rng):
    """Give a random ``fraction`` of photons Poissonian timing and a random arm."""
    moved = rng.random(len(times)) < fraction
    k = int(np.count_nonzero(moved))
    times = times.copy()
    arms = arms.copy()
    times[moved] = rng.random(k) * duration
    arms[moved] = rng.integers(0, 2, k)
    flags = flags | np.where(moved, FLAG_POISSON, 0).astype(np.uint8)
    return times, arms, flags


def simulate_basis_set(scenario: Scenario, seed: int | None = None, bases=pol.BASIS_ORDER) -> dict[str, TimeTagStream]:
    """One run per measurement basis, both photons analyzed in the same basis."""
    return {b: simulate_stream(scenario.with_basis(b), seed) for b in bases}
