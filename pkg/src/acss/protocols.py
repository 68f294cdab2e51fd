"""Prebuilt experiment programs: ac Stark echo sweeps, HYPER and AFC storage."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import sici

from .bloch_engine import EchoTrace, RegimeWarning, acss_phases, echo_metrics, evolve
from .cavity import ANCHOR_R, GAMMA_H_HZ
from .ensemble import Ensemble, EnsembleSpec, apply_spectral_trench, build_ensemble
from .mode_profile import Gaussian2DProfile, ModeProfile, relative_field
from .pulse_dsl import Pulse, Sequence, SequenceWarning, compile_timeline, validate

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
VARIANTS = ("reference", "ac1", "ac1_ac2")
SWEEP_VARIABLES = {"fig2a": "mean_rabi", "fig2b": "duration", "fig2c": "detuning"}


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class EchoConfig:
    """Two-pulse echo with optional ac Stark pulses, Fig.-2 style.

    Resonant pulses: input at ``t = 0`` and inversion ``tau`` later
    (centre to centre).  AC1 is centred in the first free-evolution gap, AC2
    between the inversion pulse and the echo.
    """

    ensemble: EnsembleSpec = EnsembleSpec()
    profile: ModeProfile = Gaussian2DProfile()
    R: float = ANCHOR_R
    tau: float = 700.0  # ns, centre-to-centre
    pulse_dur: float = 20.0  # ns
    input_rabi: float = 12.5e6  # Hz: pi/2 at mean coupling for 20 ns
    pi_rabi: float = 25e6  # Hz: pi at mean coupling for 20 ns
    acss_rabi: float = 25e6
    acss_dur: float = 200.0
    acss_det: float = 160e6
    acss_envelope: str = "square"
    ac2_scale: float = 1.0  # AC2 amplitude relative to AC1
    trench_width: float = 20e6  # Hz; 0 disables the trench
    dt: float = 0.25
    window_half: float = 40.0
    metric: str = "peak"  # or "integrated"
    uniform_probe: bool = False
    phase_cycle: int = 4  # steps of the inversion-pulse phase cycle (1, 2 or 4)

    @property
    def echo_time(self) -> float:
        return 0.5 * self.pulse_dur + 2 * self.tau

    @property
    def window(self) -> tuple[float, float]:
        return (self.echo_time - self.window_half, self.echo_time + self.window_half)

    def describe(self) -> dict:
        d = asdict(self)
        d["profile"] = self.profile.describe()
        return d


def hard_pulse_config(**changes) -> EchoConfig:
    """Regime where the hard-pulse/phase-accumulation path is expected to hold.

    Narrow inhomogeneous line (2 MHz) with 2 ns resonant pulses, so that
    ``Omega >> |delta|`` for the ions that dominate the echo, and smooth
    (gaussian) ac Stark pulses far detuned from every ion.
    """
    base = EchoConfig(
        ensemble=EnsembleSpec(count=4000, detuning_fwhm=2e6, gamma_h=GAMMA_H_HZ, seed=0),
        pulse_dur=2.0, input_rabi=125e6, pi_rabi=250e6,
        acss_rabi=15e6, acss_dur=400.0, acss_det=400e6, acss_envelope="gaussian",
        dt=0.25, window_half=20.0,
    )
    return replace(base, **changes)


# sweep grids (linear Hz / ns); the hard-pulse grids keep |Delta| >= 6 Omega_peak
FIG2_RANGES = {
    "fig2a": np.linspace(0.0, 25e6, 11),
    "fig2b": np.linspace(0.0, 600.0, 11),
    "fig2c": np.linspace(100e6, 500e6, 11),
}
FIG2_FIXED: dict = {}
HARD_PULSE_RANGES = {
    "fig2a": np.linspace(1.5e6, 15e6, 10),
    "fig2b": np.linspace(60.0, 600.0, 10),
    "fig2c": np.linspace(200e6, 480e6, 10),
}
HARD_PULSE_FIXED = {
    "fig2a": {},
    "fig2b": {"acss_rabi": 12e6, "acss_dur": 600.0},
    "fig2c": {"acss_rabi": 7.5e6, "acss_dur": 600.0},
}


def echo_sequence(cfg: EchoConfig, variant: str, pi_phase: float = 0.0) -> Sequence:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    d = cfg.pulse_dur
    pulses = [
        Pulse("resonant", 0.0, d, cfg.input_rabi),
        Pulse("resonant", cfg.tau, d, cfg.pi_rabi, 0.0, pi_phase),
    ]
    if variant != "reference" and cfg.acss_dur > 0:
        gap1 = (d, cfg.tau)
        gap2 = (cfg.tau + d, cfg.echo_time - cfg.window_half)
        for k, (lo, hi) in enumerate((gap1, gap2)):
            if k == 1 and variant == "ac1":
                break
            if cfg.acss_dur > hi - lo:
                raise ValueError(f"acss duration {cfg.acss_dur} ns does not fit in gap {lo}-{hi} ns")
            rabi = cfg.acss_rabi * (cfg.ac2_scale if k == 1 else 1.0)
            t0 = 0.5 * (lo + hi) - 0.5 * cfg.acss_dur
            pulses.append(Pulse("acss", t0, cfg.acss_dur, rabi, cfg.acss_det, 0.0, cfg.acss_envelope))
    lo, hi = cfg.window
    seq, _ = validate(pulses, (lo, hi), cfg.dt)
    return seq


def prepared_ensemble(cfg: EchoConfig, base: Ensemble | None = None) -> Ensemble:
    ens = build_ensemble(cfg.ensemble, cfg.profile) if base is None else base
    if cfg.trench_width > 0 and cfg.acss_det != 0:
        ens, _ = apply_spectral_trench(ens, cfg.acss_det, cfg.trench_width)
    return ens


def run_echo(cfg: EchoConfig, variant: str, engine: str = "fast", ensemble: Ensemble | None = None,
             **engine_kw) -> EchoTrace:
    """Echo trace, phase-cycled over the inversion pulse.

    Step ``k`` of an ``n``-step cycle shifts the inversion phase by
    ``2 pi k / n`` and is received with weight ``exp(-2 i phi_k) / n``.  Four
    steps keep only the rephasing pathway, which removes the ``1/sqrt(N)``
    residue of free-induction terms a finite ensemble leaves at echo time.
    """
    if cfg.phase_cycle not in (1, 2, 4):
        raise ValueError("phase_cycle must be 1, 2 or 4")
    ens = prepared_ensemble(cfg, ensemble)
    coh, mean_w, trace = 0.0, 0.0, None
    for k in range(cfg.phase_cycle):
        phi = TWO_PI * k / cfg.phase_cycle
        tl = compile_timeline(echo_sequence(cfg, variant, phi), cfg.R)
        trace = evolve(ens, tl, engine, uniform_probe=cfg.uniform_probe, **engine_kw)
        coh = coh + trace.coherence * np.exp(-2j * phi) / cfg.phase_cycle
        mean_w = mean_w + trace.mean_w / cfg.phase_cycle
    return EchoTrace(trace.times, coh, mean_w, trace.path)


def _metric(cfg: EchoConfig, trace: EchoTrace) -> float:
    m = echo_metrics(trace, cfg.window)
    return m["peak_intensity"] if cfg.metric == "peak" else m["integrated_intensity"]


def normalized_echo(cfg: EchoConfig, variants=("ac1", "ac1_ac2"), engine: str = "fast",
                    ensemble: Ensemble | None = None) -> dict:
    """Echo metric of each variant divided by the no-ACSS reference (same ensemble)."""
    ens = prepared_ensemble(cfg, ensemble)
    ref = _metric(cfg, run_echo(replace(cfg, trench_width=0), "reference", engine, ens))
    out = {"reference": 1.0 if ref > 0 else 0.0}
    for v in variants:
        if v == "reference":
            continue
        val = _metric(cfg, run_echo(replace(cfg, trench_width=0), v, engine, ens))
        out[v] = val / ref if ref > 0 else 0.0
    return out


# -- sweeps ----------------------------------------------------------------------

@dataclass
class SweepResult:
    parameter: str
    values: np.ndarray
    intensities: dict  # variant -> array of normalized intensities
    metadata: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # variant -> array, optional

    def to_csv(self, variant: str) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        has_err = variant in self.errors
        wr.writerow([self.parameter, "intensity"] + (["error"] if has_err else []))
        for i, x in enumerate(self.values):
            row = [repr(float(x)), repr(float(self.intensities[variant][i]))]
            if has_err:
                row.append(repr(float(self.errors[variant][i])))
            wr.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, variant: str = "data") -> "SweepResult":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        vals = np.array([float(r[0]) for r in body])
        inten = np.array([float(r[1]) for r in body])
        errors = {variant: np.array([float(r[2]) for r in body])} if len(header) > 2 else {}
        return cls(header[0], vals, {variant: inten}, {}, errors)


class SweepPointError(RuntimeError):
    """An engine failure at one swept value; the original error is ``__cause__``."""

    def __init__(self, variable: str, value: float, cause: BaseException):
        super().__init__(f"{variable}={value!r}: {type(cause).__name__}: {cause}")
        self.variable = variable
        self.value = value

    def __reduce__(self):
        return (_rebuild_point_error, (self.args[0], self.variable, self.value))


def _rebuild_point_error(message, variable, value):
    err = SweepPointError.__new__(SweepPointError)
    RuntimeError.__init__(err, message)
    err.variable, err.value = variable, value
    return err


def _sweep_point(args):
    cfg, variable, value, variants, engine = args
    point = _apply_value(cfg, variable, value)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RegimeWarning)
            warnings.simplefilter("ignore", SequenceWarning)
            return normalized_echo(point, variants, engine)
    except Exception as exc:
        raise SweepPointError(variable, float(value), exc) from exc


def _apply_value(cfg: EchoConfig, variable: str, value: float) -> EchoConfig:
    if variable == "mean_rabi":
        return replace(cfg, acss_rabi=float(value))
    if variable == "duration":
        return replace(cfg, acss_dur=float(value))
    if variable == "detuning":
        return replace(cfg, acss_det=float(value))
    raise ValueError(f"unknown sweep variable {variable!r}")


def sweep_acss_echo(variable: str, values, cfg: EchoConfig | None = None,
                    variants=VARIANTS, engine: str = "fast", jobs: int = 1) -> SweepResult:
    """Normalized echo intensity versus one ac Stark pulse parameter.

    ``variable`` is ``mean_rabi`` (Hz), ``duration`` (ns) or ``detuning``
    (Hz), or one of the aliases ``fig2a``/``fig2b``/``fig2c``.  Every point
    reuses the same seeded ensemble so the variants share sampling noise.
    """
    variable = SWEEP_VARIABLES.get(variable, variable)
    cfg = EchoConfig() if cfg is None else cfg
    values = np.asarray(values, dtype=float)
    jobs_args = [(cfg, variable, v, tuple(variants), engine) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_point, jobs_args))
    else:
        points = [_sweep_point(a) for a in jobs_args]
    intens = {v: np.array([p.get(v, np.nan) for p in points]) for v in variants}
    meta = {
        "seed": cfg.ensemble.seed,
        "ensemble": asdict(cfg.ensemble),
        "R": cfg.R,
        "engine": engine,
        "variable": variable,
        "config": cfg.describe(),
    }
    return SweepResult(variable, values, intens, meta)


def fig2_sweep(panel: str, cfg: EchoConfig | None = None, values=None, hard_pulse: bool = False,
               **kw) -> SweepResult:
    """One panel of the echo-control figure with its default grid and fixed parameters."""
    if panel not in SWEEP_VARIABLES:
        raise ValueError(f"unknown panel {panel!r}")
    if cfg is None:
        cfg = hard_pulse_config() if hard_pulse else EchoConfig()
    fixed = (HARD_PULSE_FIXED if hard_pulse else FIG2_FIXED).get(panel, {})
    cfg = replace(cfg, **fixed)
    if values is None:
        values = (HARD_PULSE_RANGES if hard_pulse else FIG2_RANGES)[panel]
    return sweep_acss_echo(SWEEP_VARIABLES[panel], values, cfg, **kw)


def echo_decay(taus, cfg: EchoConfig | None = None, engine: str = "fast") -> np.ndarray:
    """Plain two-pulse echo peak intensity for each pulse separation ``tau`` (ns)."""
    cfg = EchoConfig() if cfg is None else cfg
    ens = build_ensemble(cfg.ensemble, cfg.profile)
    out = []
    for tau in np.asarray(taus, dtype=float):
        point = replace(cfg, tau=float(tau), trench_width=0.0)
        out.append(_metric(point, run_echo(point, "reference", engine, ens)))
    return np.array(out)


# -- analytic gaussian-mode model ----------------------------------------------

def analytic_gaussian_echo(phi_max: float, truncation: float = 2.0) -> float:
    """Normalized echo intensity for a 2D-Gaussian mode truncated at ``truncation`` waists.

    Ions are spread uniformly over the disc ``r <= truncation * w``; with
    ``phi = phi_max exp(-2 r^2/w^2)`` the phase density is ``~ 1/phi`` on
    ``[phi_max e^{-2 t^2}, phi_max]`` and the mean phasor reduces to sine and
    cosine integrals.
    """
    if phi_max < 0:
        raise ValueError("phi_max must be >= 0")
    if phi_max == 0 or truncation == 0:
        return 1.0
    log_ratio = 2.0 * truncation ** 2
    lo = phi_max * math.exp(-log_ratio)
    si_hi, ci_hi = sici(phi_max)
    si_lo, ci_lo = sici(lo)
    amp = abs(complex(ci_hi - ci_lo, si_hi - si_lo)) / log_ratio
    return float(amp * amp)


def gaussian_echo_monte_carlo(phi_max: float, truncation: float = 2.0, samples: int = 10 ** 6,
                              seed: int = 0, stratified: bool = True) -> float:
    """Sampling estimate of :func:`analytic_gaussian_echo` from ion positions.

    Positions fill the disc of radius ``truncation`` waists; the phase of each
    is computed from the mode envelope itself.  ``stratified`` jitters one
    sample inside each cell of a square grid (rejecting cells' samples outside
    the disc), which removes most of the plain Monte-Carlo variance.
    """
    rng = np.random.default_rng(seed)
    prof = Gaussian2DProfile(1.0, 1.0, truncation or 1e-300, 1.0, truncation or 1e-300, "ellipse")
    if stratified:
        side = int(math.ceil(math.sqrt(samples * 4.0 / math.pi)))
        i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        x = (i.ravel() + rng.uniform(size=side * side)) / side * 2 - 1
        z = (j.ravel() + rng.uniform(size=side * side)) / side * 2 - 1
        keep = x * x + z * z <= 1.0
        pos = np.column_stack([x[keep], np.zeros(keep.sum()), z[keep]]) * [truncation, 1.0, truncation]
    else:
        pos = prof.sample_positions(rng, samples)
    f = relative_field(prof, pos)
    phi = phi_max * f ** 2
    return float(abs(np.mean(np.exp(1j * phi))) ** 2)


def engine_gaussian_echo(phi_max_values, truncation: float = 2.0, count: int = 40000, seed: int = 0,
                         detuning: float = 100e9) -> np.ndarray:
    """The same observable from the full fast-path engine.

    The mode profile is the truncated disc used by the analytic model, the
    probe addresses ions uniformly and Gamma_h = 0; the ac Stark pulse is far
    enough detuned that ``Delta - delta_j ~ Delta``.
    """
    prof = Gaussian2DProfile(1.0, 1.0, truncation, 1.0, truncation, "ellipse")
    cfg = EchoConfig(
        ensemble=EnsembleSpec(count=count, detuning_fwhm=25e6, gamma_h=0.0, seed=seed),
        profile=prof, R=1.0, acss_det=detuning, trench_width=0.0, uniform_probe=True,
        input_rabi=12.5e6, pi_rabi=25e6, dt=0.5,
    )
    ens = build_ensemble(cfg.ensemble, prof)
    out = []
    for phi in np.atleast_1d(phi_max_values):
        # square pulse: phi_max = (2 pi rabi)^2 * tau / (2 * 2 pi Delta) for a unit-coupling ion
        om = math.sqrt(2.0 * TWO_PI * detuning * phi / (cfg.acss_dur * 1e-9))
        point = replace(cfg, acss_rabi=om / TWO_PI)
        out.append(normalized_echo(point, ("ac1",), "fast", ens)["ac1"])
    return np.array(out)


# -- HYPER -----------------------------------------------------------------------

# weak (pi/8) input in the mode; inversions act as ideal, coupling-independent pi pulses
HYPER_ECHO = EchoConfig(pulse_dur=4.0, input_rabi=15.625e6, pi_rabi=125e6)


@dataclass(frozen=True)
class HyperConfig:
    echo: EchoConfig = HYPER_ECHO
    tau: float = 700.0  # input -> first inversion, centre to centre (ns)
    tau_prime: float = 250.0  # primary echo -> second inversion (ns)
    acss_rabi: float = 25e6
    acss_dur: float = 200.0
    acss_det: float = 160e6
    guard: float = 40.0  # ns kept clear around each nominal echo time
    uniform_control: bool = True
    engine: str = "ode"
    feedback_rate: float = 0.0  # rad/s; collective cavity field, ODE path only
    dt: float = 0.25

    @property
    def input_center(self) -> float:
        return 0.5 * self.echo.pulse_dur

    @property
    def primary_time(self) -> float:
        return self.input_center + 2 * self.tau

    @property
    def second_pi_center(self) -> float:
        return self.primary_time + self.tau_prime

    @property
    def hyper_time(self) -> float:
        return self.primary_time + 2 * self.tau_prime


@dataclass
class HyperResult:
    trace: EchoTrace
    events: list
    sequence: Sequence


def hyper_sequence(cfg: HyperConfig, with_acss: bool = True) -> Sequence:
    if not 0 < cfg.tau_prime < cfg.tau:
        raise ValueError("HYPER timing needs 0 < tau' < tau")
    d = cfg.echo.pulse_dur
    pi1 = Pulse("resonant", cfg.input_center + cfg.tau - d / 2, d, cfg.echo.pi_rabi)
    pi2 = Pulse("resonant", cfg.second_pi_center - d / 2, d, cfg.echo.pi_rabi)
    pulses = [Pulse("resonant", 0.0, d, cfg.echo.input_rabi), pi1, pi2]
    if with_acss:
        gap1 = (d, pi1.t0)
        gap2 = (cfg.primary_time + cfg.guard, pi2.t0)
        for lo, hi in (gap1, gap2):
            if cfg.acss_dur > hi - lo:
                raise ValueError(f"acss duration {cfg.acss_dur} ns does not fit between {lo} and {hi} ns")
        # AC1 centred before the first inversion; AC2 after the suppressed echo
        t1 = 0.5 * (gap1[0] + gap1[1]) - 0.5 * cfg.acss_dur
        t2 = gap2[0]
        for t0 in (t1, t2):
            pulses.append(Pulse("acss", t0, cfg.acss_dur, cfg.acss_rabi, cfg.acss_det, 0.0,
                                cfg.echo.acss_envelope))
    end = cfg.hyper_time + 3 * cfg.guard
    seq, _ = validate(pulses, (0.0, end), cfg.dt)
    return seq


def _find_events(cfg: HyperConfig, trace: EchoTrace) -> list:
    """Largest emission within ``window_half`` of each nominal echo time."""
    half = cfg.guard
    events = []
    for name, t in (("primary", cfg.primary_time), ("hyper", cfg.hyper_time)):
        m = echo_metrics(trace, (t - half, t + half))
        k = int(np.argmin(np.abs(trace.times - m["peak_time"])))
        events.append({
            "event": name,
            "t_ns": m["peak_time"],
            "intensity": m["peak_intensity"],
            "integrated": m["integrated_intensity"],
            "mean_w": float(trace.mean_w[k]),
        })
    return events


def run_hyper(cfg: HyperConfig | None = None, with_acss: bool = True,
              ensemble: Ensemble | None = None) -> HyperResult:
    cfg = HyperConfig() if cfg is None else cfg
    ens = build_ensemble(cfg.echo.ensemble, cfg.echo.profile) if ensemble is None else ensemble
    if cfg.echo.trench_width > 0:
        ens, _ = apply_spectral_trench(ens, cfg.acss_det, cfg.echo.trench_width)
    seq = hyper_sequence(cfg, with_acss)
    tl = compile_timeline(seq, cfg.echo.R)
    if cfg.engine == "ode":
        trace = evolve(ens, tl, "ode", feedback_rate=cfg.feedback_rate, uniform_probe=cfg.echo.uniform_probe,
                       uniform_control=cfg.uniform_control)
    else:
        if cfg.feedback_rate:
            raise ValueError("collective feedback is only available on the ODE path")
        trace = evolve(ens, tl, "fast", window=(0.0, seq.detect[1]), uniform_probe=cfg.echo.uniform_probe,
                       uniform_control=cfg.uniform_control)
    return HyperResult(trace, _find_events(cfg, trace), seq)


def compare_hyper(cfg: HyperConfig | None = None) -> dict:
    """Balanced-ACSS run against the plain double-inversion run."""
    cfg = HyperConfig() if cfg is None else cfg
    ens = build_ensemble(cfg.echo.ensemble, cfg.echo.profile)
    plain = run_hyper(cfg, False, ens)
    balanced = run_hyper(cfg, True, ens)
    p = {e["event"]: e for e in plain.events}
    b = {e["event"]: e for e in balanced.events}
    return {
        "plain": plain,
        "balanced": balanced,
        "primary_ratio": b["primary"]["intensity"] / p["primary"]["intensity"],
        "hyper_ratio": b["hyper"]["intensity"] / p["hyper"]["intensity"],
        "mean_w_at_hyper": b["hyper"]["mean_w"],
    }


# -- AFC ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AfcSpec:
    spacing: float = 5e6  # Hz
    finesse: float = 4.0
    teeth: int = 7
    optical_depth: float = 1.0  # per tooth; carried as metadata

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("tooth spacing must be positive")
        if not self.finesse > 1:
            raise ValueError("finesse must exceed 1")
        if self.teeth < 1:
            raise ValueError("need at least one tooth")

    @property
    def tooth_fwhm(self) -> float:
        return self.spacing / self.finesse

    @property
    def bandwidth(self) -> float:
        return self.teeth * self.spacing

    @property
    def storage_time(self) -> float:
        """Bare rephasing time ``1 / spacing`` in ns."""
        return 1e9 / self.spacing


def afc_prepare(ensemble: Ensemble, spec: AfcSpec, seed: int = 0) -> Ensemble:
    """Carve a comb of Gaussian teeth centred on the carrier.

    Each ion survives with probability given by the nearest tooth's profile
    (unit height, FWHM ``spacing / finesse``); ions beyond the outer teeth
    are removed.  Models pumping of the comb gaps.
    """
    d = ensemble.detuning_hz
    centers = (np.arange(spec.teeth) - (spec.teeth - 1) / 2.0) * spec.spacing
    nearest = centers[np.argmin(np.abs(d[:, None] - centers[None, :]), axis=1)] if len(d) else d
    sigma = spec.tooth_fwhm / (2 * math.sqrt(2 * math.log(2)))
    p = np.exp(-0.5 * ((d - nearest) / sigma) ** 2)
    rng = np.random.default_rng([seed, 2])
    keep = rng.uniform(size=len(d)) < p
    return ensemble.subset(keep, f"afc spacing={spec.spacing:g}Hz F={spec.finesse:g} teeth={spec.teeth}")


@dataclass(frozen=True)
class AfcConfig:
    spec: AfcSpec = AfcSpec()
    ensemble: EnsembleSpec = EnsembleSpec(count=40000, detuning_fwhm=60e6, gamma_h=GAMMA_H_HZ, seed=0)
    profile: ModeProfile = Gaussian2DProfile()
    R: float = ANCHOR_R
    input_dur: float = 4.0  # ns
    input_rabi: float = 31.25e6  # pi/4 at mean coupling for 4 ns
    acss_dur: float = 60.0  # ns per pulse of the symmetric pair
    acss_det: float = 1e9  # Hz
    dt: float = 0.25
    window_half: float = 30.0


def _afc_sequence(cfg: AfcConfig, acss_rabi: float) -> Sequence:
    pulses = [Pulse("resonant", 0.0, cfg.input_dur, cfg.input_rabi)]
    echo = 0.5 * cfg.input_dur + cfg.spec.storage_time
    if acss_rabi > 0:
        t0 = cfg.input_dur + 10.0
        # the symmetric pair is applied back to back; the shifts add
        for k, det in enumerate((cfg.acss_det, -cfg.acss_det)):
            pulses.append(Pulse("acss", t0 + k * cfg.acss_dur, cfg.acss_dur, acss_rabi, det))
        if t0 + 2 * cfg.acss_dur > echo - cfg.window_half:
            raise ValueError("ac Stark pair does not fit before the AFC echo")
    seq, _ = validate(pulses, (echo - cfg.window_half, echo + cfg.window_half + 20.0), cfg.dt)
    return seq


def afc_recall(ensemble: Ensemble, acss_rabi: float, cfg: AfcConfig | None = None) -> dict:
    """Echo time and efficiency after a symmetric ac Stark pair of mean Rabi ``acss_rabi`` (Hz).

    ``efficiency_factor`` is ``|<exp(i phi_inhom)>|^2`` over the echo-weighted
    ions, where ``phi_inhom`` is each ion's light-shift phase left over after
    removing the best common delay.  ``simulated_efficiency`` is the ratio of
    echo peak intensities from the engine traces.
    """
    cfg = AfcConfig() if cfg is None else cfg
    if cfg.spec.bandwidth > 0.25 * 2 * cfg.acss_det:
        raise ValueError(
            f"comb bandwidth {cfg.spec.bandwidth:g} Hz is not small against 2*Delta = {2 * cfg.acss_det:g} Hz")
    base_tl = compile_timeline(_afc_sequence(cfg, 0.0), cfg.R)
    base = evolve(ensemble, base_tl, "fast")
    m0 = echo_metrics(base, base_tl.sequence.detect)
    input_center = 0.5 * cfg.input_dur
    out = {
        "acss_rabi_hz": acss_rabi,
        "pulse_energy": 0.0,
        "bare_echo_ns": m0["peak_time"] - input_center,
        "echo_ns": m0["peak_time"] - input_center,
        "delay_ns": 0.0,
        "efficiency_factor": 1.0,
        "simulated_efficiency": 1.0,
    }
    if acss_rabi <= 0:
        return out
    tl = compile_timeline(_afc_sequence(cfg, acss_rabi), cfg.R)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SequenceWarning)
        trace = evolve(ensemble, tl, "fast")
    m = echo_metrics(trace, tl.sequence.detect, reference=base)
    phi = sum(acss_phases(ensemble, tl, i) for i, p in enumerate(tl.sequence.pulses) if p.kind == "acss")
    delta = ensemble.detuning
    f = ensemble.coupling
    weight = f * np.abs(np.sin(f * cfg.R * tl.pulse_area(0)))
    nz = delta != 0
    kappa = np.zeros_like(delta)
    kappa[nz] = -phi[nz] / delta[nz]
    kbar = np.sum(weight * kappa) / np.sum(weight)
    resid = phi + delta * kbar
    eff = abs(np.sum(weight * np.exp(1j * resid)) / np.sum(weight)) ** 2
    out.update({
        "pulse_energy": 2 * tl.pulse_energy(1),
        "echo_ns": m["peak_time"] - input_center,
        "delay_ns": m["peak_time"] - m0["peak_time"],
        "mean_delay_ns": float(kbar * 1e9),
        "efficiency_factor": float(eff),
        "simulated_efficiency": m["normalized_peak"],
    })
    return out


# -- spectral features ------------------------------------------------------------

def feature_linewidth_check(ensemble: Ensemble, center: float = 0.0, half_window: float | None = None) -> float:
    """FWHM (Hz) of the ion spectral density around ``center``.

    Uses the second moment of the detunings within ``half_window`` (whole
    ensemble by default), converted with the Gaussian factor 2 sqrt(2 ln 2).
    """
    d = ensemble.detuning_hz - center
    if half_window is not None:
        d = d[np.abs(d) <= half_window]
    if len(d) < 2:
        return 0.0
    return float(2 * math.sqrt(2 * math.log(2)) * np.std(d))


def shift_to_feature_ratio(shift_hz: float, feature_fwhm_hz: float) -> tuple[float, bool]:
    """Light shift over feature width; a zero width is flagged as degenerate."""
    if feature_fwhm_hz <= 0:
        return float("inf"), True
    return abs(shift_hz) / feature_fwhm_hz, False


def single_feature(spec: EnsembleSpec, width_hz: float, profile: ModeProfile | None = None,
                   seed: int = 0) -> Ensemble:
    """An isolated absorption feature of FWHM ``width_hz`` carved from a broad line."""
    ens = build_ensemble(spec, profile or Gaussian2DProfile())
    if width_hz <= 0:
        return ens.subset(ens.detuning == 0, "zero-width feature")
    return afc_prepare(ens, AfcSpec(spacing=width_hz * 2.0, finesse=2.0, teeth=1), seed)
