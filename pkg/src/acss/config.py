"""Flat ``key = value`` run configuration.

Precedence, lowest first: built-in defaults, the config file, command-line
flags.  Frequencies are linear MHz and times ns in this layer; they are
converted to the library's Hz exactly once, in the conversion methods
of :class:`RunConfig`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .cavity import ANCHOR_PHOTONS, ANCHOR_Q, ANCHOR_R, WAVELENGTH_M
from .ensemble import EnsembleSpec
from .mode_profile import Gaussian2DProfile, load_modegrid
from .protocols import AfcConfig, AfcSpec, EchoConfig, HyperConfig, HYPER_ECHO

MHZ = 1e6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    engine: str = "fast"
    dt_ns: float = 0.25
    jobs: int = 1
    out: str = "acss_out"
    # ensemble and mode
    count: int = 4000
    fwhm_mhz: float = 25.0
    gamma_h_mhz: float = 0.1
    profile: str = "gaussian2d"  # or a MODEGRID file path
    waist_x: float = 1.0
    waist_z: float = 1.0
    n_waists: float = 2.0
    shape: str = "box"
    R: float = ANCHOR_R
    # echo and ac Stark pulses
    pulse_dur_ns: float = 20.0
    input_rabi_mhz: float = 12.5
    pi_rabi_mhz: float = 25.0
    tau_ns: float = 700.0
    rabi_mhz: float = 25.0  # ac Stark mean Rabi frequency; also the calibration anchor
    acss_dur_ns: float = 200.0
    acss_det_mhz: float = 160.0
    acss_envelope: str = "square"
    trench_mhz: float = 20.0
    phase_cycle: int = 4
    metric: str = "peak"
    # sweeps (natural units of the swept variable: MHz or ns); nan keeps the panel default
    sweep_start: float = float("nan")
    sweep_stop: float = float("nan")
    sweep_points: int = 11
    # calibration
    n: float = ANCHOR_PHOTONS
    Q: float = ANCHOR_Q
    wavelength_nm: float = WAVELENGTH_M * 1e9
    K: float = 1.0
    # HYPER
    tau_prime_ns: float = 250.0
    hyper_pulse_dur_ns: float = HYPER_ECHO.pulse_dur
    hyper_input_rabi_mhz: float = HYPER_ECHO.input_rabi / MHZ
    hyper_pi_rabi_mhz: float = HYPER_ECHO.pi_rabi / MHZ
    feedback_mhz: float = 0.0
    # AFC
    comb_spacing_mhz: float = 5.0
    finesse: float = 4.0
    teeth: int = 7
    afc_count: int = 40000
    afc_fwhm_mhz: float = 60.0
    afc_det_mhz: float = 1000.0
    afc_acss_dur_ns: float = 60.0
    afc_rabi_mhz: str = "0,20,40,60,80,100"

    def validate(self) -> "RunConfig":
        if self.engine not in ("ode", "fast"):
            raise ConfigError(f"engine must be 'ode' or 'fast', got {self.engine!r}")
        if not self.dt_ns > 0:
            raise ConfigError("dt_ns must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.profile != "gaussian2d" and not Path(self.profile).is_file():
            raise ConfigError(f"mode grid file not found: {self.profile}")
        if self.phase_cycle not in (1, 2, 4):
            raise ConfigError("phase_cycle must be 1, 2 or 4")
        if self.sweep_points < 2:
            raise ConfigError("sweep_points must be >= 2")
        try:
            self.afc_rabi_values()
        except ValueError as exc:
            raise ConfigError(f"afc_rabi_mhz: {exc}") from None
        return self

    def afc_rabi_values(self) -> list[float]:
        return [float(x) for x in self.afc_rabi_mhz.split(",") if x.strip()]

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # -- conversion to library objects --------------------------------------------

    def profile_obj(self):
        if self.profile == "gaussian2d":
            return Gaussian2DProfile.from_waists(self.waist_x, self.waist_z, self.n_waists, self.shape)
        return load_modegrid(self.profile)

    def ensemble_spec(self) -> EnsembleSpec:
        return EnsembleSpec(self.count, self.fwhm_mhz * MHZ, self.gamma_h_mhz * MHZ, self.seed)

    def echo_config(self) -> EchoConfig:
        return EchoConfig(
            ensemble=self.ensemble_spec(), profile=self.profile_obj(), R=self.R, tau=self.tau_ns,
            pulse_dur=self.pulse_dur_ns, input_rabi=self.input_rabi_mhz * MHZ, pi_rabi=self.pi_rabi_mhz * MHZ,
            acss_rabi=self.rabi_mhz * MHZ, acss_dur=self.acss_dur_ns, acss_det=self.acss_det_mhz * MHZ,
            acss_envelope=self.acss_envelope, trench_width=self.trench_mhz * MHZ, dt=self.dt_ns,
            metric=self.metric, phase_cycle=self.phase_cycle,
        )

    def hyper_config(self) -> HyperConfig:
        echo = replace(self.echo_config(), pulse_dur=self.hyper_pulse_dur_ns,
                       input_rabi=self.hyper_input_rabi_mhz * MHZ, pi_rabi=self.hyper_pi_rabi_mhz * MHZ)
        return HyperConfig(
            echo=echo, tau=self.tau_ns, tau_prime=self.tau_prime_ns, acss_rabi=self.rabi_mhz * MHZ,
            acss_dur=self.acss_dur_ns, acss_det=self.acss_det_mhz * MHZ, engine=self.engine,
            feedback_rate=2 * math.pi * MHZ * self.feedback_mhz, dt=self.dt_ns,
        )

    def afc_config(self) -> AfcConfig:
        return AfcConfig(
            spec=AfcSpec(self.comb_spacing_mhz * MHZ, self.finesse, self.teeth),
            ensemble=EnsembleSpec(self.afc_count, self.afc_fwhm_mhz * MHZ, self.gamma_h_mhz * MHZ, self.seed),
            profile=self.profile_obj(), R=self.R, acss_dur=self.afc_acss_dur_ns,
            acss_det=self.afc_det_mhz * MHZ, dt=self.dt_ns,
        )


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text, 0)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config(p.read_text(), str(p)))
    for key, val in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, val) if isinstance(val, str) else val
    return RunConfig(**values).validate()


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(cfg).items())
