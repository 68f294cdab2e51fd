"""A line-oriented language for pulse sequences and its timeline compiler.

Example::

    # two-pulse echo with an ac Stark pulse in the first gap
    set dt=0.5
    pulse t0=0   dur=20  rabi=12.5e6 phase=0
    acss  t0=200 dur=200 rabi=15e6   det=160e6
    pulse t0=700 dur=20  rabi=25e6
    detect 1350 1450

Times are in ns and frequencies in linear Hz.  Conversion to angular
frequency happens in exactly one place, :func:`compile_timeline`.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

TWO_PI = 2.0 * np.pi
NS = 1e-9

DEFAULT_DT = 0.5  # ns
ENVELOPES = ("square", "gaussian")
# gaussian pulses are truncated at +-3 sigma inside their window
GAUSSIAN_SIGMAS = 3.0

_KEYS = ("t0", "dur", "rabi", "det", "phase")
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(rf"\s*(?:(?P<kv>(?P<key>[A-Za-z_]\w*)\s*=\s*(?P<val>\S+))|(?P<word>\S+))")


class SequenceSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        super().__init__(f"line {line}, col {col}: {message}" if line else message)


class SequenceError(ValueError):
    """Semantic problem with an otherwise well-formed sequence."""


class SequenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Pulse:
    kind: str  # "resonant" or "acss"
    t0: float  # ns
    dur: float  # ns
    rabi: float  # mean Rabi frequency, Hz (Omega_bar / 2pi)
    det: float = 0.0  # Hz
    phase: float = 0.0  # rad
    envelope: str = "square"

    @property
    def t_end(self) -> float:
        return self.t0 + self.dur

    @property
    def center(self) -> float:
        return self.t0 + 0.5 * self.dur

    @property
    def area(self) -> float:
        """Declared pulse area at mean coupling, ``Omega_bar * tau`` (rad)."""
        return TWO_PI * self.rabi * self.dur * NS


@dataclass(frozen=True)
class Sequence:
    pulses: tuple[Pulse, ...]
    detect: tuple[float, float]
    dt: float = DEFAULT_DT
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def resonant(self) -> tuple[Pulse, ...]:
        return tuple(p for p in self.pulses if p.kind == "resonant")

    @property
    def acss(self) -> tuple[Pulse, ...]:
        return tuple(p for p in self.pulses if p.kind == "acss")

    def center_separations(self) -> list[float]:
        """Centre-to-centre spacings of consecutive resonant pulses (ns)."""
        c = [p.center for p in self.resonant]
        return [b - a for a, b in zip(c, c[1:])]


def _overlap(a: Pulse, b: Pulse) -> bool:
    return a.t0 < b.t_end and b.t0 < a.t_end


def validate(pulses, detect, dt) -> tuple[Sequence, list[str]]:
    """Check semantic rules and return a sorted Sequence plus any warnings."""
    if not pulses:
        raise SequenceError("no pulses")
    if detect is None:
        raise SequenceError("missing detect window")
    if not dt > 0:
        raise SequenceError("dt must be positive")
    t_start, t_end = detect
    if t_start < 0 or not t_end > t_start:
        raise SequenceError(f"detect window ({t_start}, {t_end}) is empty or negative")
    for p in pulses:
        if p.t0 < 0:
            raise SequenceError(f"negative start time t0={p.t0}")
        if not p.dur > 0:
            raise SequenceError(f"pulse duration must be positive, got {p.dur}")
        if p.rabi < 0:
            raise SequenceError(f"negative rabi={p.rabi}")
        if p.kind == "acss" and p.det == 0:
            raise SequenceError(f"acss pulse at t0={p.t0} has zero detuning")
        if p.kind == "resonant" and p.det != 0:
            raise SequenceError(f"resonant pulse at t0={p.t0} has nonzero detuning")
        if p.envelope not in ENVELOPES:
            raise SequenceError(f"unknown envelope {p.envelope!r}")
    ordered = tuple(sorted(pulses, key=lambda p: p.t0))
    notes = []
    res = [p for p in ordered if p.kind == "resonant"]
    for a, b in zip(res, res[1:]):
        if _overlap(a, b):
            raise SequenceError(f"resonant pulses at t0={a.t0} and t0={b.t0} overlap")
    for a in (p for p in ordered if p.kind == "acss"):
        for b in ordered:
            if b is not a and _overlap(a, b):
                notes.append(f"acss pulse at t0={a.t0} overlaps {b.kind} pulse at t0={b.t0}")
    for msg in notes:
        warnings.warn(msg, SequenceWarning, stacklevel=3)
    return Sequence(ordered, (float(t_start), float(t_end)), float(dt), tuple(notes)), notes


def _number(text: str, line: int, col: int) -> float:
    if not re.fullmatch(_NUM, text):
        raise SequenceSyntaxError(f"expected a number, got {text!r}", line, col)
    return float(text)


def parse_sequence(text: str) -> Sequence:
    pulses: list[Pulse] = []
    detect = None
    dt = DEFAULT_DT
    envelope = "square"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        toks = []
        pos = 0
        stripped = line.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            toks.append((m, m.start("kv" if m.group("kv") else "word") + 1))
            pos = m.end()
        head, col = toks[0]
        if head.group("word") is None:
            raise SequenceSyntaxError("line must start with a statement keyword", lineno, col)
        stmt = head.group("word")
        rest = toks[1:]
        if stmt in ("pulse", "acss"):
            if not rest:
                raise SequenceSyntaxError(f"{stmt} needs key=value arguments", lineno, col)
            kv = {}
            for m, c in rest:
                if m.group("kv") is None:
                    raise SequenceSyntaxError(f"expected key=value, got {m.group('word')!r}", lineno, c)
                key = m.group("key")
                if key not in _KEYS:
                    raise SequenceSyntaxError(f"unknown key {key!r}", lineno, c)
                if key in kv:
                    raise SequenceSyntaxError(f"duplicate key {key!r}", lineno, c)
                kv[key] = _number(m.group("val"), lineno, c)
            for req in ("t0", "dur", "rabi") + (("det",) if stmt == "acss" else ()):
                if req not in kv:
                    raise SequenceSyntaxError(f"{stmt} is missing {req}=", lineno, col)
            pulses.append(Pulse(
                kind="resonant" if stmt == "pulse" else "acss",
                t0=kv["t0"], dur=kv["dur"], rabi=kv["rabi"],
                det=kv.get("det", 0.0), phase=kv.get("phase", 0.0), envelope=envelope,
            ))
        elif stmt == "detect":
            if len(rest) != 2 or any(m.group("word") is None for m, _ in rest):
                raise SequenceSyntaxError("detect takes exactly two numbers", lineno, col)
            detect = tuple(_number(m.group("word"), lineno, c) for m, c in rest)
        elif stmt == "set":
            # accept "set dt=1" and "set dt = 1"
            body = line.split(None, 1)[1] if len(line.split(None, 1)) > 1 else ""
            m = re.fullmatch(r"\s*(\w+)\s*=\s*(\S+)\s*", body)
            if not m:
                raise SequenceSyntaxError("expected set <name>=<value>", lineno, col)
            name, value = m.groups()
            vcol = line.index(value, line.index(name) + len(name)) + 1
            if name == "dt":
                dt = _number(value, lineno, vcol)
            elif name == "envelope":
                if value not in ENVELOPES:
                    raise SequenceSyntaxError(f"unknown envelope {value!r}", lineno, vcol)
                envelope = value
            else:
                raise SequenceSyntaxError(f"unknown setting {name!r}", lineno, line.index(name) + 1)
        else:
            raise SequenceSyntaxError(f"unknown statement {stmt!r}", lineno, col)
    seq, _ = validate(pulses, detect, dt)
    return seq


def format_sequence(seq: Sequence) -> str:
    """Inverse of :func:`parse_sequence` (exact round trip via ``repr`` floats)."""
    lines = [f"set dt={seq.dt!r}"]
    envelope = "square"
    for p in seq.pulses:
        if p.envelope != envelope:
            envelope = p.envelope
            lines.append(f"set envelope={envelope}")
        if p.kind == "resonant":
            lines.append(f"pulse t0={p.t0!r} dur={p.dur!r} rabi={p.rabi!r} phase={p.phase!r}")
        else:
            lines.append(f"acss t0={p.t0!r} dur={p.dur!r} rabi={p.rabi!r} det={p.det!r} phase={p.phase!r}")
    lines.append(f"detect {seq.detect[0]!r} {seq.detect[1]!r}")
    return "\n".join(lines) + "\n"


# -- timeline -----------------------------------------------------------------

KIND_NONE, KIND_RESONANT, KIND_ACSS = 0, 1, 2


@dataclass(frozen=True, eq=False)
class Timeline:
    """Piecewise-constant drive on a uniform grid ``t_k = k * dt``.

    Per step: ``rabi`` is the step-averaged mean Rabi frequency
    ``Omega_bar(t)`` (rad/s), ``detuning`` the drive offset from the probe
    (rad/s) and ``phase`` the drive phase (rad).  ``omega_max`` is
    ``R * rabi``, the Rabi frequency seen by a unit-coupling ion.
    """

    dt: float  # ns
    rabi: np.ndarray
    detuning: np.ndarray
    phase: np.ndarray
    kind: np.ndarray
    R: float
    sequence: Sequence
    pulse_steps: tuple[tuple[int, int], ...]  # [first, last) step per pulse

    @property
    def n_steps(self) -> int:
        return len(self.rabi)

    @property
    def times(self) -> np.ndarray:
        """Grid times including both ends (ns), length ``n_steps + 1``."""
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def omega_max(self) -> np.ndarray:
        return self.R * self.rabi

    @property
    def dt_s(self) -> float:
        return self.dt * NS

    def pulse_area(self, i: int) -> float:
        a, b = self.pulse_steps[i]
        return float(np.sum(self.rabi[a:b]) * self.dt_s)

    def pulse_energy(self, i: int) -> float:
        """``integral Omega_max(t)^2 dt`` over pulse ``i`` (rad^2/s)."""
        a, b = self.pulse_steps[i]
        return float(np.sum(self.omega_max[a:b] ** 2) * self.dt_s)

    def summary(self) -> dict:
        seq = self.sequence
        return {
            "dt_ns": self.dt,
            "n_steps": self.n_steps,
            "R": self.R,
            "resonant_areas_rad": [self.pulse_area(i) for i, p in enumerate(seq.pulses) if p.kind == "resonant"],
            "center_separations_ns": seq.center_separations(),
            "acss_pulses": [
                {"t0_ns": p.t0, "dur_ns": p.dur, "rabi_hz": p.rabi, "det_hz": p.det}
                for p in seq.acss
            ],
            "detect_ns": list(seq.detect),
        }


def _gaussian_step_weights(p: Pulse, edges: np.ndarray) -> np.ndarray:
    """Fraction of the pulse area falling in each grid interval."""
    sigma = p.dur / (2 * GAUSSIAN_SIGMAS)
    s2 = sigma * np.sqrt(2.0)
    lo = np.clip(edges[:-1], p.t0, p.t_end)
    hi = np.clip(edges[1:], p.t0, p.t_end)
    cdf = lambda t: 0.5 * erf((t - p.center) / s2)  # noqa: E731
    total = cdf(p.t_end) - cdf(p.t0)
    return (cdf(hi) - cdf(lo)) / total


def gaussian_peak_rabi(p: Pulse) -> float:
    """Peak angular Rabi frequency of a truncated-Gaussian pulse of area ``p.area``."""
    sigma = p.dur / (2 * GAUSSIAN_SIGMAS) * NS
    norm = sigma * np.sqrt(2 * np.pi) * erf(GAUSSIAN_SIGMAS / np.sqrt(2.0))
    return p.area / norm


def gaussian_envelope(p: Pulse, t_ns):
    """Continuous angular Rabi frequency of a gaussian pulse at ``t_ns``."""
    sigma = p.dur / (2 * GAUSSIAN_SIGMAS)
    t = np.asarray(t_ns, dtype=float)
    inside = (t >= p.t0) & (t <= p.t_end)
    return np.where(inside, gaussian_peak_rabi(p) * np.exp(-0.5 * ((t - p.center) / sigma) ** 2), 0.0)


def compile_timeline(seq: Sequence, R: float = 1.0, *, dt: float | None = None,
                     t_end: float | None = None) -> Timeline:
    """Discretize a sequence onto a uniform grid.

    Square pulses are averaged over each step so that the integrated area is
    exact even when edges fall between grid points.  ``R`` scales the mean
    Rabi frequency to that of a unit-coupling ion.
    """
    dt = seq.dt if dt is None else dt
    shortest = min(p.dur for p in seq.pulses)
    if dt > shortest / 4:
        raise SequenceError(
            f"sampling too coarse: dt={dt} ns exceeds a quarter of the shortest pulse ({shortest} ns)")
    for i, a in enumerate(seq.pulses):
        for b in seq.pulses[i + 1:]:
            if _overlap(a, b):
                raise SequenceError(
                    f"pulses at t0={a.t0} and t0={b.t0} overlap; a single-frequency timeline "
                    "cannot hold simultaneous drives")
    end = max(max(p.t_end for p in seq.pulses), seq.detect[1])
    if t_end is not None:
        end = max(end, t_end)
    n = int(math.ceil(end / dt - 1e-9))
    edges = np.arange(n + 1) * dt
    rabi = np.zeros(n)
    det = np.zeros(n)
    phase = np.zeros(n)
    kind = np.zeros(n, dtype=np.int8)
    steps = []
    for p in seq.pulses:
        first = int(math.floor(p.t0 / dt + 1e-9))
        last = int(math.ceil(p.t_end / dt - 1e-9))
        if steps and first < steps[-1][1]:
            raise SequenceError(f"pulse at t0={p.t0} shares a grid step with its predecessor; reduce dt")
        sl = slice(first, last)
        omega_bar = TWO_PI * p.rabi
        if p.envelope == "square":
            cover = np.clip(np.minimum(edges[1:], p.t_end) - np.maximum(edges[:-1], p.t0), 0.0, None) / dt
            rabi[sl] += omega_bar * cover[sl]
        else:
            w = _gaussian_step_weights(p, edges)
            rabi[sl] += w[sl] * p.area / (dt * NS)
        det[sl] = TWO_PI * p.det
        phase[sl] = p.phase
        kind[sl] = KIND_RESONANT if p.kind == "resonant" else KIND_ACSS
        steps.append((first, last))
    for arr in (rabi, det, phase, kind):
        arr.setflags(write=False)
    return Timeline(dt, rabi, det, phase, kind, float(R), seq, tuple(steps))


def with_pulses(seq: Sequence, pulses, **changes) -> Sequence:
    """Rebuild a validated sequence with new pulses (and optional detect/dt)."""
    detect = changes.get("detect", seq.detect)
    dt = changes.get("dt", seq.dt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SequenceWarning)
        out, _ = validate(list(pulses), detect, dt)
    return out

