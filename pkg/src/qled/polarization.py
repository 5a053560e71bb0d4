"""Two-photon polarization algebra for the XX-X photon pair.

Ordered product basis is (HH, HV, VH, VV), biexciton photon first.
Stokes convention: H = (+1, 0, 0), D = (0, +1, 0), L = (0, 0, +1) with
L = (|H> + i|V>)/sqrt(2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .units import HBAR_EV_S

ATOL = 1e-12
EIG_FLOOR = -1e-10

NOISE_MODES = ("white", "classical")


class InvalidStateError(ValueError):
    """Raised when a state or density matrix violates its invariants."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def jones_to_stokes(jones) -> np.ndarray:
    """Map a normalized Jones vector to its (S1, S2, S3) Poincaré point."""
    a, b = np.asarray(jones, dtype=complex)
    cross = np.conj(a) * b
    return np.array([abs(a) ** 2 - abs(b) ** 2, 2 * cross.real, 2 * cross.imag])


def stokes_to_jones(stokes) -> np.ndarray:
    """Inverse of :func:`jones_to_stokes` for unit Stokes vectors.

    The global phase is fixed by making the H component real and non-negative.
    """
    s = np.asarray(stokes, dtype=float)
    s = s / np.linalg.norm(s)
    polar = np.arctan2(np.hypot(s[1], s[2]), s[0])  # arccos loses precision near the poles
    azimuth = np.arctan2(s[2], s[1])
    return np.array([np.cos(polar / 2), np.exp(1j * azimuth) * np.sin(polar / 2)])


@dataclass(frozen=True)
class AnalyzerSetting:
    label: str
    jones: np.ndarray
    stokes: np.ndarray

    def __post_init__(self):
        jones = np.asarray(self.jones, dtype=complex)
        stokes = np.asarray(self.stokes, dtype=float)
        if jones.shape != (2,) or stokes.shape != (3,):
            raise ValueError("jones must be a 2-vector and stokes a 3-vector")
        if abs(np.linalg.norm(jones) - 1) > ATOL:
            raise ValueError(f"analyzer {self.label!r}: Jones vector not normalized")
        if np.max(np.abs(jones_to_stokes(jones) - stokes)) > ATOL:
            raise ValueError(f"analyzer {self.label!r}: Stokes vector does not match Jones vector")
        object.__setattr__(self, "jones", _freeze(jones))
        object.__setattr__(self, "stokes", _freeze(stokes))

    @classmethod
    def from_stokes(cls, label: str, stokes) -> "AnalyzerSetting":
        jones = stokes_to_jones(stokes)
        return cls(label, jones, jones_to_stokes(jones))

    @property
    def projector(self) -> np.ndarray:
        return np.outer(self.jones, np.conj(self.jones))


_R2 = 1 / np.sqrt(2)
_STOKES = {
    "H": (1, 0, 0),
    "V": (-1, 0, 0),
    "D": (0, 1, 0),
    "A": (0, -1, 0),
    "L": (0, 0, 1),
    "R": (0, 0, -1),
    # equal-weight points on the D-L-A-R great circle
    "E_LD": (0, _R2, _R2),
    "E_RA": (0, -_R2, -_R2),
    "E_LA": (0, -_R2, _R2),
    "E_RD": (0, _R2, -_R2),
}

ANALYZERS: dict[str, AnalyzerSetting] = {
    label: AnalyzerSetting.from_stokes(label, s) for label, s in _STOKES.items()
}


def analyzer(label: str) -> AnalyzerSetting:
    try:
        return ANALYZERS[label]
    except KeyError:
        raise KeyError(f"unknown analyzer {label!r}; expected one of {sorted(ANALYZERS)}") from None


@dataclass(frozen=True)
class MeasurementBasis:
    name: str
    plus: AnalyzerSetting
    minus: AnalyzerSetting

    def __post_init__(self):
        overlap = np.vdot(self.plus.jones, self.minus.jones)
        if abs(overlap) > ATOL:
            raise ValueError(f"basis {self.name!r}: analyzers are not orthogonal")


BASES: dict[str, MeasurementBasis] = {
    "hv": MeasurementBasis("hv", ANALYZERS["H"], ANALYZERS["V"]),
    "da": MeasurementBasis("da", ANALYZERS["D"], ANALYZERS["A"]),
    "lr": MeasurementBasis("lr", ANALYZERS["L"], ANALYZERS["R"]),
    "elderra": MeasurementBasis("elderra", ANALYZERS["E_LD"], ANALYZERS["E_RA"]),
    "elaerd": MeasurementBasis("elaerd", ANALYZERS["E_LA"], ANALYZERS["E_RD"]),
}
BASIS_ORDER = tuple(BASES)

_BASIS_ALIASES = {
    "eld_era": "elderra",
    "e_ld_e_ra": "elderra",
    "ela_erd": "elaerd",
    "e_la_e_rd": "elaerd",
}


def basis(name: str) -> MeasurementBasis:
    key = name.strip().lower().replace("-", "_")
    key = _BASIS_ALIASES.get(key, key)
    if key not in BASES:
        raise KeyError(f"unknown basis {name!r}; expected one of {list(BASES)}")
    return BASES[key]


@dataclass(frozen=True)
class TwoPhotonState:
    amplitudes: np.ndarray
    phase_chi: float = float("nan")

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (4,):
            raise InvalidStateError("amplitudes must be a complex 4-vector")
        if abs(np.linalg.norm(amps) - 1) > ATOL:
            raise InvalidStateError("two-photon state is not normalized")
        object.__setattr__(self, "amplitudes", _freeze(amps))

    def density_matrix(self) -> "TwoPhotonDensityMatrix":
        return TwoPhotonDensityMatrix(np.outer(self.amplitudes, np.conj(self.amplitudes)))


@dataclass(frozen=True)
class TwoPhotonDensityMatrix:
    rho: np.ndarray = field(repr=False)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.shape != (4, 4):
            raise InvalidStateError("density matrix must be 4x4")
        if np.max(np.abs(rho - rho.conj().T)) > ATOL:
            raise InvalidStateError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1) > ATOL:
            raise InvalidStateError("density matrix trace differs from 1")
        if np.linalg.eigvalsh(rho).min() < EIG_FLOOR:
            raise InvalidStateError("density matrix has a negative eigenvalue")
        object.__setattr__(self, "rho", _freeze(rho))


def as_density_matrix(state) -> TwoPhotonDensityMatrix:
    if isinstance(state, TwoPhotonDensityMatrix):
        return state
    if isinstance(state, TwoPhotonState):
        return state.density_matrix()
    return TwoPhotonDensityMatrix(state)


def bell_state(chi: float) -> TwoPhotonState:
    """(|HH> + e^{i chi}|VV>)/sqrt(2)."""
    chi = float(chi)
    if not np.isfinite(chi):
        raise ValueError("chi must be finite")
    amps = np.array([1, 0, 0, np.exp(1j * chi)]) * _R2
    return TwoPhotonState(amps, chi)


def cascade_phase(fss_ueV, delay_ps):
    """Phase S*tau/hbar accumulated in the exciton state, in radians."""
    return np.asarray(fss_ueV) * 1e-6 * np.asarray(delay_ps) * 1e-12 / HBAR_EV_S


def noise_state(mode: str = "white") -> TwoPhotonDensityMatrix:
    """Maximally mixed noise (``white``) or HV-only classical correlations (``classical``)."""
    if mode == "white":
        return TwoPhotonDensityMatrix(np.eye(4) / 4)
    if mode == "classical":
        return TwoPhotonDensityMatrix(np.diag([0.5, 0, 0, 0.5]))
    raise ValueError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")


def mix_white_noise(state: TwoPhotonState, v: float, mode: str = "white") -> TwoPhotonDensityMatrix:
    """v |psi><psi| + (1 - v) N, with N = I/4 unless ``mode='classical'``."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"visibility v={v} outside [0, 1]")
    pure = as_density_matrix(state).rho
    return TwoPhotonDensityMatrix(v * pure + (1 - v) * noise_state(mode).rho)


def coincidence_probability(state, a_xx: AnalyzerSetting, a_x: AnalyzerSetting) -> float:
    """Born-rule probability that the XX photon passes ``a_xx`` and the X photon passes ``a_x``."""
    rho = as_density_matrix(state).rho
    phi = np.kron(a_xx.jones, a_x.jones)
    return float(np.real(np.conj(phi) @ rho @ phi))


def outcome_probabilities(state, basis_xx: MeasurementBasis, basis_x: MeasurementBasis) -> np.ndarray:
    """Probabilities of (++, +-, -+, --) analyzer outcomes, XX arm first."""
    rho = as_density_matrix(state)
    return np.array([
        coincidence_probability(rho, a, b)
        for a in (basis_xx.plus, basis_xx.minus)
        for b in (basis_x.plus, basis_x.minus)
    ])


def fidelity_to_state(rho, psi: TwoPhotonState) -> float:
    rho = as_density_matrix(rho).rho
    amps = psi.amplitudes
    return float(np.real(np.conj(amps) @ rho @ amps))


def theoretical_correlation(basis: MeasurementBasis, state, basis_x: MeasurementBasis | None = None) -> float:
    """Co/cross contrast (P_co - P_cross)/(P_co + P_cross) for the given analyzer bases."""
    p = outcome_probabilities(state, basis, basis_x or basis)
    co = p[0] + p[3]
    cross = p[1] + p[2]
    if co + cross < 1e-12:
        raise InvalidStateError("no coincidence probability in this basis; state is unphysical")
    return float((co - cross) / (co + cross))


def setting_correlation(state, stokes_xx, stokes_x) -> float:
    """Correlation E(a, b) for analyzers pointed along arbitrary Poincaré directions.

    Each analyzer is a (plus, minus) pair along +n and -n, so this is the
    same contrast as :func:`theoretical_correlation` for a custom basis.
    """
    sa = np.asarray(stokes_xx, dtype=float)
    sb = np.asarray(stokes_x, dtype=float)
    b_xx = MeasurementBasis("custom", AnalyzerSetting.from_stokes("+", sa), AnalyzerSetting.from_stokes("-", -sa))
    b_x = MeasurementBasis("custom", AnalyzerSetting.from_stokes("+", sb), AnalyzerSetting.from_stokes("-", -sb))
    return theoretical_correlation(b_xx, state, b_x)
