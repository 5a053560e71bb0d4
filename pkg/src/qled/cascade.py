"""Monte Carlo model of the biexciton-exciton cascade under DC drive.

The dot runs as a renewal process: after the exciton photon leaves, the
dot waits an exponential refill time, emits the biexciton photon after an
exponential XX lifetime, then the exciton photon after the exciton delay.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import polarization as pol
from .units import PS_PER_S

# photon kinds in the ideal click lists
XX = 0
X = 1


@dataclass(frozen=True)
class CascadeParams:
    """Source parameters.

    ``cycle_rate_hz`` is the mean rate of complete cascade cycles; the
    exponential refill wait is shortened by the mean radiative time so the
    renewal rate equals it exactly.

    ``poisson_fraction`` is the fraction of photons at each transition
    wavelength whose emission time is uncorrelated with the cascade
    (Poissonian contamination); such photons are also unpolarized.
    """

    fss_ueV: float = 17.7
    x_lifetime_ps: float = 1000.0
    xx_lifetime_ps: float = 500.0
    cycle_rate_hz: float = 5e6
    reexcitation_rate_hz: float = 0.0
    background_fraction: float = 0.0
    noise_mode: str = "white"
    poisson_fraction: float = 0.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def problems_for(cls, **kwargs) -> list[str]:
        """Validation messages for a would-be instance, without raising."""
        probe = object.__new__(cls)
        for f in fields(cls):
            object.__setattr__(probe, f.name, kwargs.get(f.name, f.default))
        return probe.problems()

    def problems(self) -> list[str]:
        out = []
        if not self.fss_ueV >= 0:
            out.append("fss_ueV must be >= 0")
        if not self.x_lifetime_ps > 0:
            out.append("x_lifetime_ps must be > 0")
        if not self.xx_lifetime_ps > 0:
            out.append("xx_lifetime_ps must be > 0")
        if not self.cycle_rate_hz > 0:
            out.append("cycle_rate_hz must be > 0")
        if not self.reexcitation_rate_hz >= 0:
            out.append("reexcitation_rate_hz must be >= 0")
        if not 0 <= self.background_fraction < 1:
            out.append("background_fraction must lie in [0, 1)")
        if not 0 <= self.poisson_fraction <= 1:
            out.append("poisson_fraction must lie in [0, 1]")
        if self.noise_mode not in pol.NOISE_MODES:
            out.append(f"noise_mode must be one of {pol.NOISE_MODES}")
        if not out and self.refill_mean_ps <= 0:
            out.append(
                "cycle_rate_hz too high: cycle period must exceed the mean XX lifetime plus exciton delay"
            )
        return out

    @property
    def x_decay_rate_per_ps(self) -> float:
        """Total exciton depopulation rate, radiative plus re-excitation."""
        return 1 / self.x_lifetime_ps + self.reexcitation_rate_hz / PS_PER_S

    @property
    def mean_x_delay_ps(self) -> float:
        return 1 / self.x_decay_rate_per_ps

    @property
    def reexcitation_probability(self) -> float:
        return (self.reexcitation_rate_hz / PS_PER_S) / self.x_decay_rate_per_ps

    @property
    def cycle_period_ps(self) -> float:
        return PS_PER_S / self.cycle_rate_hz

    @property
    def refill_mean_ps(self) -> float:
        return self.cycle_period_ps - self.xx_lifetime_ps - self.mean_x_delay_ps

    @property
    def visibility(self) -> float:
        return 1 - self.background_fraction

    def with_overrides(self, **overrides) -> "CascadeParams":
        return replace(self, **overrides)


CASCADE_FIELDS = tuple(f.name for f in fields(CascadeParams))


@dataclass(frozen=True)
class PairEvent:
    xx_emit_time_ps: float
    x_delay_ps: float
    latent_state: pol.TwoPhotonDensityMatrix

    def __post_init__(self):
        if not self.x_delay_ps > 0:
            raise ValueError("x_delay_ps must be positive")

    @property
    def x_emit_time_ps(self) -> float:
        return self.xx_emit_time_ps + self.x_delay_ps


def pair_state(params: CascadeParams, x_delay_ps: float, reexcited: bool = False) -> pol.TwoPhotonDensityMatrix:
    """Latent polarization state of one pair given its exciton delay."""
    if reexcited:
        return pol.noise_state(params.noise_mode)
    chi = float(pol.cascade_phase(params.fss_ueV, x_delay_ps))
    return pol.mix_white_noise(pol.bell_state(chi), params.visibility, params.noise_mode)


def sample_cascade_event(params: CascadeParams, rng: np.random.Generator, after_ps: float = 0.0) -> PairEvent:
    """Draw the next cascade of a dot that became empty at ``after_ps``."""
    refill = rng.exponential(params.refill_mean_ps)
    xx_life = rng.exponential(params.xx_lifetime_ps)
    x_delay = rng.exponential(params.mean_x_delay_ps)
    reexcited = rng.random() < params.reexcitation_probability
    return PairEvent(after_ps + refill + xx_life, x_delay, pair_state(params, x_delay, reexcited))


def iter_cascade_events(params: CascadeParams, rng: np.random.Generator, start_ps: float = 0.0):
    """Endless sequence of consecutive cascades from one dot."""
    t = start_ps
    while True:
        event = sample_cascade_event(params, rng, t)
        t = event.x_emit_time_ps
        yield event


@dataclass
class CascadeBatch:
    """Column form of many consecutive :class:`PairEvent` draws."""

    xx_time_ps: np.ndarray
    x_delay_ps: np.ndarray
    reexcited: np.ndarray

    def __len__(self):
        return len(self.xx_time_ps)

    @property
    def x_time_ps(self) -> np.ndarray:
        return self.xx_time_ps + self.x_delay_ps


def sample_cascade_batch(params: CascadeParams, rng: np.random.Generator, n: int, start_ps: float = 0.0) -> CascadeBatch:
    """Vectorized equivalent of ``n`` consecutive :func:`sample_cascade_event` calls."""
    refill = rng.exponential(params.refill_mean_ps, n)
    xx_life = rng.exponential(params.xx_lifetime_ps, n)
    x_delay = rng.exponential(params.mean_x_delay_ps, n)
    reexcited = rng.random(n) < params.reexcitation_probability
    cycle = refill + xx_life + x_delay
    cycle_end = start_ps + np.cumsum(cycle)
    xx_time = cycle_end - x_delay
    return CascadeBatch(xx_time, x_delay, reexcited)


def sample_cascades_until(params: CascadeParams, rng: np.random.Generator, end_ps: float, chunk: int = 1 << 18) -> CascadeBatch:
    """All cascades whose biexciton photon is emitted before ``end_ps``."""
    parts = []
    t = 0.0
    if end_ps > 0:
        while True:
            batch = sample_cascade_batch(params, rng, chunk, t)
            keep = batch.xx_time_ps < end_ps
            if not keep.all():
                n = int(np.count_nonzero(keep))
                parts.append(CascadeBatch(batch.xx_time_ps[:n], batch.x_delay_ps[:n], batch.reexcited[:n]))
                break
            parts.append(batch)
            t = float(batch.x_time_ps[-1])
    if not parts:
        return CascadeBatch(np.empty(0), np.empty(0), np.empty(0, dtype=bool))
    return CascadeBatch(
        np.concatenate([p.xx_time_ps for p in parts]),
        np.concatenate([p.x_delay_ps for p in parts]),
        np.concatenate([p.reexcited for p in parts]),
    )


def pure_outcome_probabilities(chi, basis_xx: pol.MeasurementBasis, basis_x: pol.MeasurementBasis) -> np.ndarray:
    """Outcome probabilities (++, +-, -+, --) of bell_state(chi) for an array of phases.

    Shape (n, 4). Agrees with :func:`polarization.outcome_probabilities` to rounding.
    """
    chi = np.atleast_1d(np.asarray(chi, dtype=float))
    phase = np.exp(1j * chi)
    out = np.empty((chi.size, 4))
    k = 0
    for a in (basis_xx.plus, basis_xx.minus):
        for b in (basis_x.plus, basis_x.minus):
            hh = np.conj(a.jones[0]) * np.conj(b.jones[0])
            vv = np.conj(a.jones[1]) * np.conj(b.jones[1])
            out[:, k] = np.abs(hh + phase * vv) ** 2 / 2
            k += 1
    return out


def sample_outcomes(params: CascadeParams, batch: CascadeBatch, basis_xx, basis_x, rng: np.random.Generator) -> np.ndarray:
    """Joint analyzer outcome index 0..3 = (++, +-, -+, --) for every pair in the batch.

    Each latent state is v*|psi(chi)><psi(chi)| + (1-v)*N, so outcomes are drawn
    from the pure-state law with probability v and from the noise law otherwise.
    """
    n = len(batch)
    noise_p = pol.outcome_probabilities(pol.noise_state(params.noise_mode), basis_xx, basis_x)
    chi = pol.cascade_phase(params.fss_ueV, batch.x_delay_ps)
    probs = pure_outcome_probabilities(chi, basis_xx, basis_x)
    from_noise = batch.reexcited | (rng.random(n) >= params.visibility)
    probs[from_noise] = noise_p
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(n) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), 3)


@dataclass(frozen=True)
class Click:
    photon: int  # XX or X
    arm: int  # 0 = plus analyzer, 1 = minus analyzer
    time_ps: float


def resolve_clicks(event: PairEvent, basis_xx: pol.MeasurementBasis, basis_x: pol.MeasurementBasis,
                   rng: np.random.Generator) -> list[Click]:
    """Sample which analyzer arm each photon of ``event`` exits."""
    p = pol.outcome_probabilities(event.latent_state, basis_xx, basis_x)
    k = int(rng.choice(4, p=p / p.sum()))
    return [Click(XX, k // 2, event.xx_emit_time_ps), Click(X, k % 2, event.x_emit_time_ps)]


@dataclass(frozen=True)
class TemperatureModel:
    """Calibration table of (temperature_K, x_lifetime_ps, background_fraction) rows."""

    table: tuple[tuple[float, float, float], ...]
    interpolation: str = "linear"

    def __post_init__(self):
        rows = tuple(tuple(float(v) for v in row) for row in self.table)
        object.__setattr__(self, "table", rows)
        if not rows:
            raise ValueError("temperature table is empty")
        if self.interpolation != "linear":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        temps = [r[0] for r in rows]
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ValueError("temperature table rows must be strictly increasing in temperature")
        for t, life, bg in rows:
            if not life > 0:
                raise ValueError(f"row {t} K: x_lifetime_ps must be > 0")
            if not 0 <= bg < 1:
                raise ValueError(f"row {t} K: background_fraction must lie in [0, 1)")

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([r[0] for r in self.table])


def params_at_temperature(model: TemperatureModel, temperature_K: float) -> dict[str, float]:
    """Interpolated CascadeParams overrides at ``temperature_K``; no extrapolation."""
    temps = model.temperatures
    if not temps[0] <= temperature_K <= temps[-1]:
        raise ValueError(
            f"temperature {temperature_K} K outside calibrated range [{temps[0]}, {temps[-1]}] K"
        )
    i = int(np.searchsorted(temps, temperature_K, side="right")) - 1
    if i == len(temps) - 1 or temps[i] == temperature_K:
        _, life, bg = model.table[i]
        return {"x_lifetime_ps": life, "background_fraction": bg}
    t0, l0, b0 = model.table[i]
    t1, l1, b1 = model.table[i + 1]
    w = (temperature_K - t0) / (t1 - t0)
    return {"x_lifetime_ps": l0 + w * (l1 - l0), "background_fraction": b0 + w * (b1 - b0)}
