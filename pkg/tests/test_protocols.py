import math
import pickle
import warnings
from dataclasses import replace

import numpy as np
import pytest

from acss.bloch_engine import RegimeWarning
from acss.ensemble import EnsembleSpec, build_ensemble
from acss.mode_profile import Gaussian2DProfile
from acss.protocols import (
    HYPER_ECHO,
    AfcConfig,
    AfcSpec,
    EchoConfig,
    HyperConfig,
    SweepPointError,
    SweepResult,
    afc_prepare,
    afc_recall,
    analytic_gaussian_echo,
    compare_hyper,
    echo_decay,
    echo_sequence,
    feature_linewidth_check,
    gaussian_echo_monte_carlo,
    hyper_sequence,
    normalized_echo,
    run_echo,
    run_hyper,
    shift_to_feature_ratio,
    single_feature,
    sweep_acss_echo,
)

# |<exp(i phi_max exp(-2 r^2))>|^2 over the disc r <= 2, by adaptive quadrature
QUADRATURE = {0.5: 0.8949813406869471, 1: 0.6839085777072538, 2: 0.514763940361842, 3: 0.4645471922746196}

SMALL = EchoConfig(ensemble=EnsembleSpec(count=500, seed=2))


def test_echo_sequence_variants():
    ref = echo_sequence(SMALL, "reference")
    ac1 = echo_sequence(SMALL, "ac1")
    both = echo_sequence(SMALL, "ac1_ac2")
    assert len(ref.pulses) == 2 and len(ac1.acss) == 1 and len(both.acss) == 2
    a, b = both.acss
    assert (a.dur, a.rabi, a.det) == (b.dur, b.rabi, b.det)
    # AC1 centred in the first gap
    assert a.center == pytest.approx(0.5 * (SMALL.pulse_dur + SMALL.tau))
    assert both.detect == SMALL.window
    assert SMALL.echo_time == pytest.approx(10.0 + 1400.0)


def test_echo_sequence_edge_cases():
    assert len(echo_sequence(replace(SMALL, acss_dur=0.0), "ac1_ac2").acss) == 0
    scaled = echo_sequence(replace(SMALL, ac2_scale=0.5), "ac1_ac2")
    assert scaled.acss[1].rabi == pytest.approx(0.5 * scaled.acss[0].rabi)
    with pytest.raises(ValueError):
        echo_sequence(replace(SMALL, acss_dur=800.0), "ac1")
    with pytest.raises(ValueError):
        echo_sequence(SMALL, "ac3")


def test_zero_drive_is_reference():
    out = normalized_echo(replace(SMALL, acss_rabi=0.0))
    assert out == {"reference": 1.0, "ac1": 1.0, "ac1_ac2": 1.0}


@pytest.mark.filterwarnings("ignore::acss.bloch_engine.RegimeWarning")
def test_phase_cycling_cancels_residue():
    strong = replace(SMALL, acss_rabi=25e6, acss_dur=300.0)
    cycled = normalized_echo(strong)
    single = normalized_echo(replace(strong, phase_cycle=1))
    assert cycled["ac1_ac2"] == pytest.approx(1.0, abs=1e-9)
    assert cycled["ac1"] < 0.3
    # without the cycle a 500-ion ensemble leaves visible FID residue
    assert abs(single["ac1_ac2"] - 1.0) > 1e-6
    with pytest.raises(ValueError):
        run_echo(replace(SMALL, phase_cycle=3), "reference")


def test_sweep_result_csv_round_trip():
    res = SweepResult("duration", np.array([0.0, 100.0]), {"ac1": np.array([1.0, 0.5])},
                      errors={"ac1": np.array([0.01, 0.02])})
    back = SweepResult.from_csv(res.to_csv("ac1"), "ac1")
    assert back.parameter == "duration"
    np.testing.assert_array_equal(back.values, res.values)
    np.testing.assert_array_equal(back.intensities["ac1"], res.intensities["ac1"])
    np.testing.assert_array_equal(back.errors["ac1"], res.errors["ac1"])


def test_sweep_parallel_matches_serial():
    vals = np.array([0.0, 10e6, 20e6])
    a = sweep_acss_echo("fig2a", vals, replace(SMALL, phase_cycle=1), ("ac1",), jobs=1)
    b = sweep_acss_echo("mean_rabi", vals, replace(SMALL, phase_cycle=1), ("ac1",), jobs=2)
    assert a.to_csv("ac1") == b.to_csv("ac1")
    assert a.metadata["seed"] == 2


def test_sweep_error_names_the_point():
    with pytest.raises(SweepPointError) as info:
        sweep_acss_echo("duration", [100.0, 900.0], SMALL, ("ac1",))
    assert info.value.value == 900.0
    assert isinstance(info.value.__cause__, ValueError)
    again = pickle.loads(pickle.dumps(info.value))
    assert (again.variable, again.value, str(again)) == ("duration", 900.0, str(info.value))


def test_echo_decay_rate():
    cfg = replace(SMALL, ensemble=EnsembleSpec(count=500, gamma_h=200e3, seed=1))
    i = echo_decay([300.0, 500.0], cfg)
    # field decays as exp(-pi Gamma_h 2 tau); intensity twice as fast
    assert i[1] / i[0] == pytest.approx(math.exp(-4 * math.pi * 200e3 * 200e-9), rel=1e-9)


@pytest.mark.parametrize("k", sorted(QUADRATURE))
def test_analytic_echo_against_quadrature(k):
    assert analytic_gaussian_echo(k * math.pi) == pytest.approx(QUADRATURE[k], abs=1e-12)


def test_analytic_echo_limits():
    assert analytic_gaussian_echo(0.0) == 1.0
    assert analytic_gaussian_echo(2.0, truncation=0.0) == 1.0
    assert analytic_gaussian_echo(1e-4) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        analytic_gaussian_echo(-1.0)


def test_plain_monte_carlo_agrees_loosely():
    mc = gaussian_echo_monte_carlo(math.pi, samples=200_000, stratified=False)
    assert mc == pytest.approx(QUADRATURE[1], abs=5e-3)


def test_hyper_timing():
    cfg = HyperConfig()
    seq = hyper_sequence(cfg)
    res = seq.resonant
    assert res[1].center - res[0].center == pytest.approx(cfg.tau)
    assert res[2].center == pytest.approx(cfg.primary_time + cfg.tau_prime)
    assert cfg.hyper_time == pytest.approx(cfg.input_center + 2 * cfg.tau + 2 * cfg.tau_prime)
    ac1, ac2 = seq.acss
    assert ac1.t_end <= res[1].t0 and ac2.t0 == pytest.approx(cfg.primary_time + cfg.guard)
    assert ac2.t_end <= res[2].t0
    assert len(hyper_sequence(cfg, with_acss=False).acss) == 0
    with pytest.raises(ValueError):
        hyper_sequence(replace(cfg, tau_prime=800.0))


def test_hyper_fast_path_suppresses_primary():
    cfg = HyperConfig(echo=replace(HYPER_ECHO, ensemble=EnsembleSpec(count=2000)), engine="fast")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        r = compare_hyper(cfg)
        with pytest.raises(ValueError):
            run_hyper(replace(cfg, feedback_rate=1e6))
    assert r["primary_ratio"] < 0.1
    assert r["mean_w_at_hyper"] < -0.8
    # balanced shifts cancel on the one pathway that refocuses at the HYPER time
    assert r["hyper_ratio"] == pytest.approx(1.0, abs=1e-6)


def test_afc_spec():
    s = AfcSpec(spacing=5e6, finesse=4, teeth=7)
    assert s.tooth_fwhm == 1.25e6 and s.bandwidth == 35e6 and s.storage_time == pytest.approx(200.0)
    with pytest.raises(ValueError):
        AfcSpec(finesse=1.0)
    with pytest.raises(ValueError):
        AfcSpec(teeth=0)


def test_afc_prepare_keeps_teeth():
    spec = AfcSpec()
    ens = build_ensemble(EnsembleSpec(count=20000, detuning_fwhm=60e6), Gaussian2DProfile())
    comb = afc_prepare(ens, spec, 0)
    d = comb.detuning_hz
    assert np.all(np.abs(d) < 3.5 * spec.spacing + 3 * spec.tooth_fwhm)
    # offsets from the nearest tooth are narrow
    off = (d + 0.5 * spec.spacing) % spec.spacing - 0.5 * spec.spacing
    assert 2.3548 * np.std(off) == pytest.approx(spec.tooth_fwhm, rel=0.1)


def test_afc_recall_guard_and_zero_drive():
    cfg = AfcConfig()
    ens = afc_prepare(build_ensemble(cfg.ensemble, cfg.profile), cfg.spec)
    out = afc_recall(ens, 0.0, cfg)
    assert out["bare_echo_ns"] == pytest.approx(200.0, abs=cfg.dt)
    assert out["efficiency_factor"] == 1.0
    with pytest.raises(ValueError):
        afc_recall(ens, 10e6, replace(cfg, acss_det=50e6))


def test_features():
    ens = build_ensemble(EnsembleSpec(count=50000), Gaussian2DProfile())
    assert feature_linewidth_check(ens) == pytest.approx(25e6, rel=0.01)
    narrow = single_feature(EnsembleSpec(count=50000), 1e6)
    assert feature_linewidth_check(narrow) == pytest.approx(1e6, rel=0.1)
    assert len(single_feature(EnsembleSpec(count=100), 0.0)) == 0
    assert shift_to_feature_ratio(12.3e6, 1e6) == (12.3, False)
    assert shift_to_feature_ratio(1.0, 0.0) == (math.inf, True)
