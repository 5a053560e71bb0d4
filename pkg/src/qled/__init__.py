"""Simulation and analysis of a telecom-wavelength entangled-light-emitting diode.

Modules
-------
polarization
    Jones/Stokes algebra, two-photon states, correlations and fidelity.
cascade, detector, simulate
    Monte Carlo cascade source and detector chain producing time-tag streams.
correlator
    Coincidence histograms, g2, degree of correlation, fidelity and CHSH curves.
fitting
    Decay and oscillation fits of correlation curves.
fss
    Fine-structure splitting from quarter-wave-plate scans.
io, cli
    File formats and the ``qled`` command line.
"""

from .cascade import CascadeParams, TemperatureModel
from .detector import DetectorModel
from .polarization import TwoPhotonDensityMatrix, TwoPhotonState, bell_state, mix_white_noise
from .simulate import Scenario, simulate_basis_set, simulate_stream
from .stream import TimeTagStream

__version__ = "0.1.0"

__all__ = [
    "CascadeParams",
    "DetectorModel",
    "Scenario",
    "TemperatureModel",
    "TimeTagStream",
    "TwoPhotonDensityMatrix",
    "TwoPhotonState",
    "bell_state",
    "mix_white_noise",
    "simulate_basis_set",
    "simulate_stream",
]
