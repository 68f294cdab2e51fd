"""Least-squares extraction of R and T2, plus count normalization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import minimize_scalar

from .protocols import EchoConfig, SWEEP_VARIABLES, SweepResult, sweep_acss_echo

log = logging.getLogger(__name__)

R_BOUNDS = (1.0, 3.0)


@dataclass
class FitReport:
    R: float
    stderr: float
    converged: bool
    n_evals: int
    residual_ss: float
    n_points: int
    message: str = ""
    per_variant: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("R", "stderr", "converged", "n_evals", "residual_ss", "n_points",
                                           "message")}
        d["per_variant"] = {k: v.as_dict() for k, v in self.per_variant.items()}
        return d


def _curvature(fun: Callable[[float], float], x: float, fx: float, h: float, lo: float, hi: float) -> float:
    if hi - lo < 2 * h:
        return float("nan")
    # slide the three-point stencil inside the bounds when x sits near one
    c = min(max(x, lo + h), hi - h)
    fc = fx if c == x else fun(c)
    return (fun(c - h) - 2 * fc + fun(c + h)) / (h * h)


def fit_scalar(residuals: Callable[[float], np.ndarray], bounds: tuple[float, float] = R_BOUNDS,
               sigma: np.ndarray | None = None, xtol: float = 1e-5, maxiter: int = 200) -> FitReport:
    """Minimize the (weighted) sum of squared residuals over one bounded parameter.

    The standard error comes from the curvature of the objective at the
    minimum: ``sqrt(2 / S'')`` with known ``sigma``, otherwise scaled by the
    reduced residual variance.  A minimum pinned at a bound is reported as
    not converged.
    """
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("empty bounds")
    calls = [0]
    n_pts = [0]

    def objective(x):
        calls[0] += 1
        r = np.asarray(residuals(x), dtype=float)
        if sigma is not None:
            r = r / sigma
        n_pts[0] = r.size
        return float(np.sum(r * r))

    res = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": xtol, "maxiter": maxiter})
    x, s_min = float(res.x), float(res.fun)
    at_bound = min(x - lo, hi - x) < 10 * xtol
    converged = bool(res.success) and not at_bound
    h = max(1e-3 * (hi - lo), 1e3 * xtol)
    curv = _curvature(objective, x, s_min, h, lo, hi)
    if not (curv > 0):
        stderr = float("nan")
    elif sigma is not None:
        stderr = math.sqrt(2.0 / curv)
    else:
        dof = max(n_pts[0] - 1, 1)
        stderr = math.sqrt(2.0 * s_min / dof / curv)
    msg = "minimum at bound" if at_bound else str(res.message)
    return FitReport(x, stderr, converged, calls[0], s_min, n_pts[0], msg)


def fig2_model(cfg: EchoConfig, variable: str, values, variants=("ac1",), engine: str = "fast",
               jobs: int = 1) -> Callable[[float], dict]:
    """Normalized-intensity model as a function of R, all else held fixed."""
    variable = SWEEP_VARIABLES.get(variable, variable)

    def model(R: float) -> dict:
        res = sweep_acss_echo(variable, values, replace(cfg, R=float(R)), variants, engine, jobs)
        return res.intensities

    return model


def fit_R(data: Mapping[str, np.ndarray], model: Callable[[float], dict], bounds=R_BOUNDS,
          sigma: Mapping[str, np.ndarray] | None = None, per_variant: bool = True) -> FitReport:
    """Fit R jointly across every variant in ``data``, and optionally per variant."""
    variants = list(data)
    if not variants:
        raise ValueError("no data to fit")
    y = {v: np.asarray(data[v], dtype=float) for v in variants}
    cache: dict = {}

    def predict(R):
        if R not in cache:
            cache[R] = model(R)
        return cache[R]

    def joint(R):
        m = predict(R)
        return np.concatenate([m[v] - y[v] for v in variants])

    sig = None if sigma is None else np.concatenate([np.asarray(sigma[v], dtype=float) for v in variants])
    report = fit_scalar(joint, bounds, sig)
    if per_variant and len(variants) > 1:
        for v in variants:
            sv = None if sigma is None else np.asarray(sigma[v], dtype=float)
            report.per_variant[v] = fit_scalar(lambda R, v=v: predict(R)[v] - y[v], bounds, sv)
    return report


def fit_exponential_decay(tau_ns, intensity, rate_factor: float = 4.0) -> dict:
    """Fit ``I = I0 exp(-rate_factor * tau / T2)`` by weighted log-linear least squares.

    Weights ``I`` compensate the log transform's inflation of small values.
    Returns ``T2`` in seconds with its standard error.
    """
    tau = np.asarray(tau_ns, dtype=float) * 1e-9
    y = np.asarray(intensity, dtype=float)
    if len(tau) < 3 or np.any(y <= 0):
        raise ValueError("need at least three positive intensities")
    if len(tau) > 3:
        (slope, icpt), cov = np.polyfit(tau, np.log(y), 1, w=y, cov=True)
        slope_err = math.sqrt(max(cov[0, 0], 0.0))
    else:
        slope, icpt = np.polyfit(tau, np.log(y), 1, w=y)
        slope_err = float("nan")
    t2 = -rate_factor / slope
    resid = np.log(y) - (slope * tau + icpt)
    return {
        "T2_s": float(t2),
        "T2_err_s": float(abs(t2 / slope) * slope_err),
        "I0": float(np.exp(icpt)),
        "max_log_residual": float(np.max(np.abs(resid))),
    }


def ratio_with_error(signal: float, signal_err: float, reference: float, reference_err: float
                     ) -> tuple[float, float]:
    """Ratio of two count rates with first-order error propagation."""
    if reference == 0:
        raise ZeroDivisionError("reference count rate is zero")
    ratio = signal / reference
    if signal == 0:
        return 0.0, abs(signal_err / reference)
    return ratio, abs(ratio) * math.hypot(signal_err / signal, reference_err / reference)


def normalize_counts(raw, reference, raw_err=None, reference_err=None, values=None,
                     parameter: str = "index") -> SweepResult:
    """Pointwise ``raw / reference`` as a single-variant SweepResult (variant ``data``).

    Uncertainties propagate in quadrature when both error series are given.
    Points whose reference is zero are dropped and their indices recorded in
    ``metadata["dropped"]``.
    """
    raw = np.asarray(raw, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if raw.shape != ref.shape:
        raise ValueError("raw and reference differ in length")
    x = np.arange(len(raw), dtype=float) if values is None else np.asarray(values, dtype=float)
    if x.shape != raw.shape:
        raise ValueError("values differ in length from the counts")
    ok = ref != 0
    dropped = np.nonzero(~ok)[0].tolist()
    if dropped:
        log.warning("dropping %d point(s) with zero reference: %s", len(dropped), dropped)
    ratio = raw[ok] / ref[ok]
    errors = {}
    if raw_err is not None and reference_err is not None:
        se = np.asarray(raw_err, dtype=float)[ok]
        re = np.asarray(reference_err, dtype=float)[ok]
        errors["data"] = np.array([ratio_with_error(a, b, c, d)[1] for a, b, c, d in zip(raw[ok], se, ref[ok], re)])
    return SweepResult(parameter, x[ok], {"data": ratio}, {"dropped": dropped}, errors)
