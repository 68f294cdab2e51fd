"""Inhomogeneously broadened ion ensembles and spectral-hole preparation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .mode_profile import ModeProfile, sample_couplings

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

# independent stream labels: position and frequency must stay uncorrelated
_POSITION_STREAM = 0
_DETUNING_STREAM = 1


@dataclass(frozen=True)
class EnsembleSpec:
    count: int = 4000
    detuning_fwhm: float = 25e6  # Hz
    gamma_h: float = 100e3  # Hz
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("ensemble count must be >= 1")
        if self.detuning_fwhm < 0:
            raise ValueError("detuning FWHM must be >= 0")
        if self.gamma_h < 0:
            raise ValueError("gamma_h must be >= 0")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Per-ion arrays for a simulated ensemble.

    ``detuning`` is the angular offset from the probe carrier (rad/s),
    ``coupling`` the relative mode coupling and ``bloch`` an ``(N, 3)`` array
    of ``(u, v, w)``.  Arrays are read-only; engines work on copies.
    """

    detuning: np.ndarray
    coupling: np.ndarray
    bloch: np.ndarray
    gamma_h: float
    spec: EnsembleSpec | None = None
    profile_info: dict = field(default_factory=dict)
    history: tuple = ()

    def __post_init__(self):
        n = len(self.detuning)
        if len(self.coupling) != n or self.bloch.shape != (n, 3):
            raise ValueError("inconsistent ensemble array shapes")
        for arr in (self.detuning, self.coupling, self.bloch):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.detuning)

    @property
    def detuning_hz(self) -> np.ndarray:
        return self.detuning / TWO_PI

    def subset(self, keep: np.ndarray, note: str) -> "Ensemble":
        keep = np.asarray(keep, dtype=bool)
        return replace(
            self,
            detuning=self.detuning[keep].copy(),
            coupling=self.coupling[keep].copy(),
            bloch=self.bloch[keep].copy(),
            history=self.history + (note,),
        )

    def collective_coherence(self) -> complex:
        if len(self) == 0:
            return 0j
        s = self.bloch[:, 0] + 1j * self.bloch[:, 1]
        return complex(np.sum(self.coupling * s) / np.sum(self.coupling))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta_hz", "f", "u", "v", "w"])
        for d, f, (u, v, ww) in zip(self.detuning_hz, self.coupling, self.bloch):
            w.writerow([repr(float(d)), repr(float(f)), repr(float(u)), repr(float(v)), repr(float(ww))])
        return buf.getvalue()


def build_ensemble(spec: EnsembleSpec, profile: ModeProfile) -> Ensemble:
    """Sample detunings (Gaussian, untruncated) and couplings from independent streams."""
    couplings = sample_couplings(profile, spec.count, [spec.seed, _POSITION_STREAM])
    rng = np.random.default_rng([spec.seed, _DETUNING_STREAM])
    sigma = spec.detuning_fwhm / FWHM_PER_SIGMA
    delta_hz = rng.normal(0.0, 1.0, size=spec.count) * sigma
    if couplings.n_zero:
        # zero-field draws were dropped; keep the first `count` detunings aligned
        delta_hz = delta_hz[: couplings.count]
    n = couplings.count
    bloch = np.zeros((n, 3))
    bloch[:, 2] = -1.0
    return Ensemble(
        detuning=TWO_PI * delta_hz,
        coupling=np.array(couplings.values, dtype=float),
        bloch=bloch,
        gamma_h=spec.gamma_h,
        spec=spec,
        profile_info=profile.describe(),
        history=(f"built n={n} dropped_zero_field={couplings.n_zero}",),
    )


def apply_spectral_trench(ensemble: Ensemble, center: float, width: float) -> tuple[Ensemble, int]:
    """Remove ions with ``|delta - center| < width/2`` (frequencies in Hz).

    Models optical pumping into the other spin level.  Returns the reduced
    ensemble and the number of ions removed.
    """
    if not width > 0:
        raise ValueError("trench width must be positive")
    inside = np.abs(ensemble.detuning_hz - center) < width / 2.0
    removed = int(inside.sum())
    out = ensemble.subset(~inside, f"trench center={center:g}Hz width={width:g}Hz removed={removed}")
    log.debug("trench at %.3g Hz removed %d ions", center, removed)
    return out, removed
