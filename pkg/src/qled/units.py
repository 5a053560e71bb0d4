import math

from scipy import constants

HBAR_EV_S = constants.hbar / constants.e
H_EV_S = constants.h / constants.e

PS_PER_S = 10**12
FWHM_PER_SIGMA = 2 * math.sqrt(2 * math.log(2))


def oscillation_period_ps(fss_ueV: float) -> float:
    """Period 2*pi*hbar/S of the cascade phase, in picoseconds."""
    return H_EV_S / (fss_ueV * 1e-6) * PS_PER_S
