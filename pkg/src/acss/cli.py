"""Command-line entry point: calibrate, simulate, sweep, protocol and fit.

Exit status: 0 on success, 1 for invalid input (flags, config, sequence or
mode-grid files), 2 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bloch_engine import StepSizeError, echo_metrics, evolve
from .cavity import calibration_chain
from .config import ConfigError, RunConfig, format_config, load_config
from .ensemble import apply_spectral_trench, build_ensemble
from .fitting import fig2_model, fit_R
from .mode_profile import ModeGridFormatError, OutOfDomainError
from .protocols import (FIG2_FIXED, FIG2_RANGES, SWEEP_VARIABLES, SweepPointError, SweepResult,
                        afc_prepare, afc_recall, compare_hyper, fig2_sweep)
from .pulse_dsl import SequenceError, SequenceSyntaxError, compile_timeline, format_sequence, parse_sequence

log = logging.getLogger("acss")

VALIDATION_ERRORS = (ConfigError, SequenceError, SequenceSyntaxError, ModeGridFormatError, StepSizeError,
                     OutOfDomainError)
MHZ_VARIABLES = ("mean_rabi", "detuning")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="ensemble seed (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, help="worker processes for sweep points")
    p.add_argument("--engine", choices=("ode", "fast"))
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--gamma-h", type=float, metavar="MHZ", help="homogeneous linewidth")
    p.add_argument("--rabi-mhz", type=float, help="ac Stark mean Rabi frequency (also the calibration anchor)")
    p.add_argument("--R", type=float, help="max/mean Rabi-frequency ratio")
    p.add_argument("--n", type=float, help="mean intracavity photon number for calibration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="acss", description="ac Stark control of rare-earth ion echoes in a nanocavity")
    parser.add_argument("--version", action="version", version=f"acss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("calibrate", help="evaluate the drive -> photon number -> g -> light-shift chain")
    _common(p)

    p = sub.add_parser("simulate", help="run a pulse-sequence file through the engine")
    p.add_argument("sequence", help="pulse sequence file")
    _common(p)

    p = sub.add_parser("sweep", help="echo intensity versus one ac Stark parameter")
    p.add_argument("panel", choices=sorted(SWEEP_VARIABLES))
    _common(p)

    p = sub.add_parser("protocol", help="prebuilt experiments")
    p.add_argument("name", choices=sorted(SWEEP_VARIABLES) + ["afc", "hyper"])
    _common(p)

    p = sub.add_parser("fit", help="fit R to a sweep CSV")
    p.add_argument("data", help="CSV written by sweep/protocol (one variant)")
    p.add_argument("--variant", default="ac1", choices=("ac1", "ac1_ac2"))
    p.add_argument("--bounds", type=float, nargs=2, default=(1.0, 3.0), metavar=("LO", "HI"))
    _common(p)
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    flags = {"seed": args.seed, "jobs": args.jobs, "engine": args.engine, "out": args.out,
             "gamma_h_mhz": args.gamma_h, "rabi_mhz": args.rabi_mhz, "R": args.R, "n": args.n}
    over.update({k: v for k, v in flags.items() if v is not None})
    return over


# -- output ---------------------------------------------------------------------------

class Writer:
    """Collects output files and writes the manifest last."""

    def __init__(self, cfg: RunConfig, argv: list[str]):
        self.dir = Path(cfg.out)
        self.cfg = cfg
        self.argv = argv
        self.files: list[tuple[str, str]] = []

    def text(self, name: str, content: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / name).write_text(content)
        self.files.append((name, hashlib.sha256(content.encode()).hexdigest()))

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def manifest(self) -> None:
        self.text("config.txt", format_config(self.cfg))
        manifest = {
            "argv": self.argv,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "versions": {"acss": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "outputs": [{"file": n, "sha256": h} for n, h in self.files],
        }
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# -- subcommands ---------------------------------------------------------------------

def cmd_calibrate(cfg: RunConfig, out: Writer) -> dict:
    chain = calibration_chain(rabi_hz=cfg.rabi_mhz * 1e6, R=cfg.R, n=cfg.n, detuning_hz=cfg.acss_det_mhz * 1e6,
                              Q=cfg.Q, wavelength_m=cfg.wavelength_nm * 1e-9, K=cfg.K,
                              gamma_h_hz=cfg.gamma_h_mhz * 1e6)
    out.json("calibration.json", chain)
    return chain


def cmd_simulate(cfg: RunConfig, out: Writer, path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"sequence file not found: {path}")
    seq = parse_sequence(p.read_text())
    tl = compile_timeline(seq, cfg.R)
    ens = build_ensemble(cfg.ensemble_spec(), cfg.profile_obj())
    if cfg.trench_mhz > 0:
        for det in sorted({q.det for q in seq.acss}):
            ens, _ = apply_spectral_trench(ens, det, cfg.trench_mhz * 1e6)
    trace = evolve(ens, tl, cfg.engine, **({"jobs": cfg.jobs} if cfg.engine == "ode" else {}))
    m = echo_metrics(trace, seq.detect)
    out.text("trace.csv", trace.to_csv())
    summary = {"sequence": str(p), "timeline": tl.summary(), "ions": len(ens), "engine": cfg.engine,
               "detect_metrics": m}
    out.json("simulate.json", summary)
    return {"peak_time_ns": m["peak_time"], "peak_intensity": m["peak_intensity"]}


def _panel_values(cfg: RunConfig, panel: str) -> np.ndarray:
    if np.isnan(cfg.sweep_start) or np.isnan(cfg.sweep_stop):
        return FIG2_RANGES[panel]
    scale = 1e6 if SWEEP_VARIABLES[panel] in MHZ_VARIABLES else 1.0
    return np.linspace(cfg.sweep_start, cfg.sweep_stop, cfg.sweep_points) * scale


def cmd_sweep(cfg: RunConfig, out: Writer, panel: str) -> dict:
    res = fig2_sweep(panel, cfg.echo_config(), _panel_values(cfg, panel), engine=cfg.engine, jobs=cfg.jobs)
    for v in res.intensities:
        out.text(f"{panel}_{v}.csv", res.to_csv(v))
    meta = dict(res.metadata, panel=panel, fixed=FIG2_FIXED.get(panel, {}), variants=list(res.intensities))
    out.json(f"{panel}_meta.json", meta)
    return {v: [round(float(x), 6) for x in res.intensities[v]] for v in res.intensities}


def cmd_hyper(cfg: RunConfig, out: Writer) -> dict:
    r = compare_hyper(cfg.hyper_config())
    for name in ("plain", "balanced"):
        out.text(f"hyper_{name}_trace.csv", r[name].trace.to_csv())
    rows = [(name, e["event"], e["t_ns"], e["intensity"], e["integrated"], e["mean_w"])
            for name in ("plain", "balanced") for e in r[name].events]
    out.text("hyper_events.csv", _rows_csv(["run", "event", "t_ns", "intensity", "integrated", "mean_w"], rows))
    summary = {k: r[k] for k in ("primary_ratio", "hyper_ratio", "mean_w_at_hyper")}
    out.json("hyper_meta.json", dict(summary, sequence=format_sequence(r["balanced"].sequence), seed=cfg.seed))
    return summary


def cmd_afc(cfg: RunConfig, out: Writer) -> dict:
    acfg = cfg.afc_config()
    ens = afc_prepare(build_ensemble(acfg.ensemble, acfg.profile), acfg.spec, cfg.seed)
    keys = ["acss_rabi_hz", "pulse_energy", "echo_ns", "delay_ns", "mean_delay_ns", "efficiency_factor",
            "simulated_efficiency"]
    rows = []
    for om in cfg.afc_rabi_values():
        r = afc_recall(ens, om * 1e6, acfg)
        r.setdefault("mean_delay_ns", 0.0)
        rows.append([r[k] for k in keys])
    out.text("afc_delay.csv", _rows_csv(keys, rows))
    meta = {"ions": len(ens), "bare_echo_ns": rows[0][2] if rows else None,
            "storage_time_ns": acfg.spec.storage_time, "history": list(ens.history), "seed": cfg.seed}
    out.json("afc_meta.json", meta)
    return {"delay_ns": [r[3] for r in rows], "efficiency_factor": [r[5] for r in rows]}


def cmd_fit(cfg: RunConfig, out: Writer, path: str, variant: str, bounds) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"data file not found: {path}")
    try:
        data = SweepResult.from_csv(p.read_text(), variant)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: not a sweep CSV ({exc})") from None
    if data.parameter not in SWEEP_VARIABLES.values():
        raise ConfigError(f"{path}: unknown swept parameter {data.parameter!r}")
    if len(data.values) < 5:
        raise ConfigError(f"{path}: need at least 5 points to fit, got {len(data.values)}")
    panel = next(k for k, v in SWEEP_VARIABLES.items() if v == data.parameter)
    ecfg = replace(cfg.echo_config(), **FIG2_FIXED.get(panel, {}))
    model = fig2_model(ecfg, data.parameter, data.values, (variant,), cfg.engine, cfg.jobs)
    sigma = {variant: data.errors[variant]} if variant in data.errors else None
    report = fit_R({variant: data.intensities[variant]}, model, tuple(bounds), sigma)
    result = dict(report.as_dict(), parameter="R", data=str(p), variant=variant)
    out.json("fit.json", result)
    return result


def _dispatch(args, cfg: RunConfig, out: Writer) -> dict:
    if args.command == "calibrate":
        return cmd_calibrate(cfg, out)
    if args.command == "simulate":
        return cmd_simulate(cfg, out, args.sequence)
    if args.command == "fit":
        return cmd_fit(cfg, out, args.data, args.variant, args.bounds)
    name = args.panel if args.command == "sweep" else args.name
    if name in SWEEP_VARIABLES:
        return cmd_sweep(cfg, out, name)
    if name == "hyper":
        return cmd_hyper(cfg, out)
    return cmd_afc(cfg, out)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "calibrate" and cfg.n <= 0:
            raise ConfigError("photon number must be positive")
    except VALIDATION_ERRORS as exc:
        print(f"acss: invalid configuration: {exc}", file=sys.stderr)
        return 1
    out = Writer(cfg, argv)
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            result = _dispatch(args, cfg, out)
        out.manifest()
    except VALIDATION_ERRORS as exc:
        print(f"acss: invalid input: {exc}", file=sys.stderr)
        return 1
    except SweepPointError as exc:
        code = 1 if isinstance(exc.__cause__, VALIDATION_ERRORS) else 2
        print(f"acss: sweep failed at {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"acss: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return 0


def main() -> None:
    sys.exit(run())
