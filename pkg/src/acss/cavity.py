"""Calibration chain linking drive strength, photon number, g and light shifts.

Angular frequencies (rad/s) throughout; helpers convert from linear Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi
C_LIGHT = 299_792_458.0

# device anchors quoted for the Nd:YVO4 nanocavity
ANCHOR_RABI_HZ = 25e6
ANCHOR_R = 1.83
ANCHOR_R_ERR = 0.02
ANCHOR_PHOTONS = 0.53
ANCHOR_G_HZ = 31.4e6
ANCHOR_DETUNING_HZ = 160e6
ANCHOR_ACSS_HZ = 12.3e6
ANCHOR_Q = 2.8e3
WAVELENGTH_M = 879.9e-9
GAMMA_H_HZ = 100e3
GAMMA_F_HZ = 3e6
ANCHOR_CROSS_PHASE = 3e-4


@dataclass(frozen=True)
class CavityParams:
    g: float  # rad/s
    Q: float
    nu: float = C_LIGHT / WAVELENGTH_M  # Hz
    kappa_in_fraction: float = 0.5

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("g must be positive")
        if not self.Q > 0:
            raise ValueError("Q must be positive")
        if not 0.0 <= self.kappa_in_fraction <= 1.0:
            raise ValueError("kappa_in_fraction must lie in [0, 1]")

    @property
    def kappa(self) -> float:
        """Total energy decay rate ``omega / Q`` (1/s)."""
        return TWO_PI * self.nu / self.Q


def photon_number(mean_rabi: float, R: float, g: float) -> float:
    """Mean intracavity photon number from ``Omega_max = R * Omega_bar = 2 g sqrt(n)``."""
    if mean_rabi < 0 or R <= 0 or g <= 0:
        raise ValueError("photon_number needs mean_rabi >= 0 and R, g > 0")
    return (R * mean_rabi / (2.0 * g)) ** 2


def infer_g(mean_rabi: float, R: float, n: float) -> float:
    if n <= 0:
        raise ValueError("photon number must be positive to infer g")
    return R * mean_rabi / (2.0 * math.sqrt(n))


def infer_g_uncertainty(mean_rabi: float, R: float, n: float, R_err: float) -> float:
    """First-order propagation of an uncertainty in ``R`` onto ``g``."""
    return infer_g(mean_rabi, R, n) * R_err / R


def single_photon_acss(g: float, detuning: float) -> float:
    """Signed light shift ``2 g^2 / Delta`` of a maximally coupled ion for one photon."""
    if detuning == 0:
        raise ValueError("single-photon ACSS is undefined at zero detuning")
    return 2.0 * g * g / detuning


def cavity_lifetime(Q: float, nu: float) -> float:
    """Photon lifetime ``Q / (2 pi nu)`` in seconds."""
    if Q <= 0 or nu <= 0:
        raise ValueError("Q and nu must be positive")
    return Q / (TWO_PI * nu)


def cross_phase(g: float, detuning: float, lifetime: float, K: float = 1.0) -> float:
    """Phase imprinted by one photon dwelling ``lifetime`` in the cavity.

    ``K`` absorbs the lifetime convention (field vs intensity decay); the
    default ``K = 1`` takes the shift times the photon lifetime at face value.
    """
    if g == 0:
        return 0.0
    return single_photon_acss(g, detuning) * lifetime * K


def impedance_matched_efficiency(x: float, y: float, loss: float | None = None) -> float:
    """Storage efficiency ``4 x y / (x + y + l)^2`` of a one-sided cavity memory.

    ``x`` is the input-coupling rate, ``y`` the ensemble absorption rate and
    ``l`` the parasitic loss rate, all as fractions of the bare cavity decay
    (``x + l = 1`` when ``loss`` is omitted).  Unity requires ``l = 0`` and
    ``y = x``.
    """
    if loss is None:
        loss = 1.0 - x
    if x < 0 or y < 0 or loss < 0:
        raise ValueError("rates must be non-negative")
    total = x + y + loss
    if total == 0:
        return 0.0
    return 4.0 * x * y / total ** 2


def calibration_chain(rabi_hz: float = ANCHOR_RABI_HZ, R: float = ANCHOR_R, n: float = ANCHOR_PHOTONS,
                      detuning_hz: float = ANCHOR_DETUNING_HZ, Q: float = ANCHOR_Q,
                      wavelength_m: float = WAVELENGTH_M, K: float = 1.0,
                      R_err: float = ANCHOR_R_ERR, gamma_h_hz: float = GAMMA_H_HZ,
                      gamma_f_hz: float = GAMMA_F_HZ) -> dict:
    """Evaluate every link of the calibration chain; frequencies reported in linear Hz."""
    omega_bar = TWO_PI * rabi_hz
    g = infer_g(omega_bar, R, n)
    shift = single_photon_acss(g, TWO_PI * detuning_hz)
    nu = C_LIGHT / wavelength_m
    tau_c = cavity_lifetime(Q, nu)
    phase = cross_phase(g, TWO_PI * detuning_hz, tau_c, K)
    return {
        "rabi_hz": rabi_hz,
        "R": R,
        "photon_number": n,
        "photon_number_check": photon_number(omega_bar, R, g),
        "g_hz": g / TWO_PI,
        "g_err_hz": infer_g_uncertainty(omega_bar, R, n, R_err) / TWO_PI,
        "detuning_hz": detuning_hz,
        "single_photon_acss_hz": shift / TWO_PI,
        "acss_over_gamma_h": shift / TWO_PI / gamma_h_hz,
        "acss_over_gamma_f": shift / TWO_PI / gamma_f_hz,
        "Q": Q,
        "optical_frequency_hz": nu,
        "cavity_lifetime_s": tau_c,
        "cross_phase_rad": phase,
        "cross_phase_K": K,
        "cross_phase_assumption": "phase = (2 g^2 / Delta) * Q / (2 pi nu) * K",
    }
