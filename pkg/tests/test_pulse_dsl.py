import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acss.pulse_dsl import (
    Pulse,
    SequenceError,
    SequenceSyntaxError,
    SequenceWarning,
    compile_timeline,
    format_sequence,
    gaussian_peak_rabi,
    parse_sequence,
    validate,
)

ECHO = """
# comment line
set dt=0.5
pulse t0=0   dur=20 rabi=12.5e6
acss  t0=200 dur=200 rabi=15e6 det=160e6   # trailing comment
pulse t0=700 dur=20 rabi=25e6 phase=1.5
detect 1350 1450
"""


def test_parse_basic():
    seq = parse_sequence(ECHO)
    assert seq.dt == 0.5
    assert [p.kind for p in seq.pulses] == ["resonant", "acss", "resonant"]
    assert seq.pulses[2].phase == 1.5
    assert seq.detect == (1350.0, 1450.0)
    assert seq.center_separations() == [700.0]
    # 12.5 MHz for 20 ns is a pi/2 pulse
    assert seq.pulses[0].area == pytest.approx(math.pi / 2)


def test_pulses_sorted_by_start():
    seq = parse_sequence("pulse t0=700 dur=20 rabi=1e6\npulse t0=0 dur=20 rabi=1e6\ndetect 800 900\n")
    assert [p.t0 for p in seq.pulses] == [0.0, 700.0]


@pytest.mark.parametrize("text, line, col", [
    ("pulse t0=0 dur=20\ndetect 1 2", 1, 1),           # missing rabi
    ("pulse t0=0 dur=20 rabi=1e6 foo=3\ndetect 1 2", 1, 28),
    ("pulse t0=0 dur=abc rabi=1\ndetect 1 2", 1, 12),
    ("\nwobble 3\n", 2, 1),
    ("pulse t0=0 t0=1 dur=2 rabi=1\ndetect 1 2", 1, 12),
    ("pulse t0=0 dur=20 rabi=1e6\ndetect 1", 2, 1),
    ("set dt=0.1\nset colour=red\n", 2, 5),
    ("acss t0=0 dur=20 rabi=1e6\ndetect 1 2", 1, 1),   # missing det
])
def test_syntax_errors_report_position(text, line, col):
    with pytest.raises(SequenceSyntaxError) as info:
        parse_sequence(text)
    assert (info.value.line, info.value.col) == (line, col)


@pytest.mark.parametrize("text", [
    "pulse t0=0 dur=20 rabi=1e6\n",                                   # no detect
    "pulse t0=-5 dur=20 rabi=1e6\ndetect 100 200",
    "pulse t0=0 dur=0 rabi=1e6\ndetect 100 200",
    "pulse t0=0 dur=20 rabi=-1\ndetect 100 200",
    "pulse t0=0 dur=20 rabi=1e6 det=5e6\ndetect 100 200",
    "acss t0=0 dur=20 rabi=1e6 det=0\ndetect 100 200",
    "pulse t0=0 dur=20 rabi=1e6\npulse t0=10 dur=20 rabi=1e6\ndetect 100 200",
    "pulse t0=0 dur=20 rabi=1e6\ndetect 200 100",
    "detect 100 200",
])
def test_semantic_errors(text):
    with pytest.raises(SequenceError):
        parse_sequence(text)


def test_acss_overlap_warns_and_compile_refuses():
    text = "pulse t0=0 dur=20 rabi=1e6\nacss t0=10 dur=50 rabi=1e6 det=1e8\ndetect 100 200"
    with pytest.warns(SequenceWarning):
        seq = parse_sequence(text)
    assert seq.warnings
    with pytest.raises(SequenceError):
        compile_timeline(seq)


def test_round_trip_exact():
    seq = parse_sequence(ECHO)
    again = parse_sequence(format_sequence(seq))
    assert again == seq


def test_gaussian_envelope_round_trip():
    seq = parse_sequence("set envelope=gaussian\nacss t0=0 dur=60 rabi=1e7 det=1e8\n"
                         "set envelope=square\npulse t0=100 dur=10 rabi=1e6\ndetect 200 300")
    assert [p.envelope for p in seq.pulses] == ["gaussian", "square"]
    assert parse_sequence(format_sequence(seq)) == seq


def test_timeline_areas_exact_off_grid():
    # edges at 0.3 ns and 20.3 ns do not fall on the 0.25 ns grid
    seq, _ = validate([Pulse("resonant", 0.3, 20.0, 12.5e6)], (30.0, 40.0), 0.25)
    tl = compile_timeline(seq, R=1.83)
    assert tl.pulse_area(0) == pytest.approx(math.pi / 2, rel=1e-12)
    assert tl.omega_max.max() == pytest.approx(1.83 * 2 * math.pi * 12.5e6)
    assert tl.n_steps == 160


def test_gaussian_timeline_area_and_peak():
    p = Pulse("acss", 10.0, 60.0, 10e6, 1e8, envelope="gaussian")
    seq, _ = validate([p], (100.0, 110.0), 0.25)
    tl = compile_timeline(seq)
    assert tl.pulse_area(0) == pytest.approx(p.area, rel=1e-12)
    assert tl.rabi.max() == pytest.approx(gaussian_peak_rabi(p), rel=2e-3)


def test_coarse_dt_rejected():
    seq = parse_sequence("set dt=5\npulse t0=0 dur=10 rabi=1e6\ndetect 100 200")
    with pytest.raises(SequenceError):
        compile_timeline(seq)


def test_summary_fields():
    tl = compile_timeline(parse_sequence(ECHO), R=2.0)
    s = tl.summary()
    assert s["R"] == 2.0
    assert s["center_separations_ns"] == [700.0]
    assert len(s["resonant_areas_rad"]) == 2
    assert s["acss_pulses"][0]["det_hz"] == 160e6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1.0, 50.0), st.floats(0.0, 5e7), st.floats(-3.0, 3.0)),
                min_size=1, max_size=5))
def test_round_trip_property(specs):
    pulses, t = [], 0.0
    for dur, rabi, phase in specs:
        pulses.append(Pulse("resonant", t, dur, rabi, 0.0, phase))
        t += dur + 1.0
    seq, _ = validate(pulses, (t, t + 10.0), 0.25)
    assert parse_sequence(format_sequence(seq)) == seq


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(1.0, 40.0), st.sampled_from([0.1, 0.2, 0.25]))
def test_area_conserved_property(t0, dur, dt):
    seq, _ = validate([Pulse("resonant", t0, dur, 5e6)], (t0 + dur + 1, t0 + dur + 2), dt)
    if dt > dur / 4:
        return
    tl = compile_timeline(seq)
    assert tl.pulse_area(0) == pytest.approx(seq.pulses[0].area, rel=1e-9)
    assert np.all(tl.rabi >= 0)
