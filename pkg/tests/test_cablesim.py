import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofdr.analysis import band_mean, frequency_noise_psd
from ofdr.cablesim import (
    CableModel,
    LaserModel,
    LaserPhaseTrack,
    PerturbationEvent,
    RepeaterModel,
    SpanModel,
    calibrate_noise_floor,
    expected_delays,
    propagate,
    random_unitary,
    rotation,
    roundtrip_delay,
    roundtrip_jones,
    roundtrip_phase,
    simulate_captures,
    synth_laser_phase,
    unitarity_deviation,
)
from ofdr.dsp import detect_peaks, estimate_snr, matched_filter
from ofdr.errors import CalibrationError, ConfigError
from ofdr.waveform import generate_sweep

from .conftest import uniform_cable
from .oracles import roundtrip_s


# --- geometry -------------------------------------------------------------


def test_roundtrip_delay_examples():
    cable = uniform_cable(3)
    assert roundtrip_delay(cable, 0, 0.0) == 0.0
    assert float(roundtrip_delay(cable, 1, 0.0)) == pytest.approx(97.93e-6, rel=1e-4)
    assert float(roundtrip_delay(cable, 1, 0.0)) == pytest.approx(roundtrip_s(10), rel=1e-12)
    with pytest.raises(IndexError):
        roundtrip_delay(cable, 4, 0.0)


def test_drift_counts_on_both_passes():
    ev = PerturbationEvent("Step", 1, 1.0, target="delay")
    plain, drifted = uniform_cable(4), uniform_cable(4, events=[ev])
    for k in range(1, 5):
        extra = float(roundtrip_delay(drifted, k, 1.0) - roundtrip_delay(plain, k, 1.0))
        assert extra == pytest.approx(2e-9, abs=1e-18)


def test_return_correlation_scales_the_return_pass():
    ev = PerturbationEvent("Step", 2, 1.0, target="phase")
    half = uniform_cable(3, events=[ev], return_correlation=0.5)
    assert float(roundtrip_phase(half, 3, 0.5)) == pytest.approx(1.5)


def test_sinusoid_on_span_five_is_additive():
    ev = PerturbationEvent("Sinusoid", 5, 2.0, frequency=1.0)
    cable = uniform_cable(8, events=[ev])
    t = np.linspace(0, 2, 401)
    d5 = roundtrip_phase(cable, 5, t) - roundtrip_phase(cable, 4, t)
    assert np.allclose(d5, 4.0 * np.sin(2 * np.pi * t))
    assert np.all(roundtrip_phase(cable, 3, t) == 0)
    for k in (6, 7, 8):
        assert np.allclose(roundtrip_phase(cable, k, t), roundtrip_phase(cable, 5, t))


def test_delay_phase_coupling_mode():
    ev = PerturbationEvent("Step", 1, 0.001, target="delay")  # 1 ps
    off = uniform_cable(1, events=[ev])
    on = uniform_cable(1, events=[ev], couple_delay_phase=True, carrier_hz=193.4e12)
    assert float(roundtrip_phase(off, 1, 0.0)) == 0.0
    assert float(roundtrip_phase(on, 1, 0.0)) == pytest.approx(2 * 2 * np.pi * 193.4e12 * 1e-12)


def test_identity_cable_has_identity_jones():
    cable = uniform_cable(4)
    assert np.allclose(roundtrip_jones(cable, 4, 0.0), np.eye(2))


def test_jones_order_is_return_times_forward():
    a, b = rotation(0.3), np.diag([1, 1j])
    cable = uniform_cable(2, jones=[a, b])
    assert np.allclose(roundtrip_jones(cable, 2, 0.0), (a @ b) @ (b @ a))


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_random_spans_keep_jones_unitary(seed, n):
    rng = np.random.default_rng(seed)
    cable = uniform_cable(n, jones=[random_unitary(rng) for _ in range(n)])
    for k in range(1, n + 1):
        assert unitarity_deviation(roundtrip_jones(cable, k, 0.0)) < 1e-12


def test_polarization_event_rotates_the_column():
    ev = PerturbationEvent("Step", 1, math.pi / 8, target="polarization")
    cable = uniform_cable(1, events=[ev])
    assert np.allclose(roundtrip_jones(cable, 1, 0.0), rotation(math.pi / 4))


def test_model_validation():
    with pytest.raises(ConfigError):
        SpanModel(length_km=0)
    with pytest.raises(ConfigError):
        RepeaterModel(hllb_coupling_db=3)
    with pytest.raises(ConfigError):
        CableModel([SpanModel()], [])
    with pytest.raises(ConfigError):
        PerturbationEvent("Step", 1, 1.0, start=2, stop=1)
    with pytest.raises(ConfigError):
        uniform_cable(2, events=[PerturbationEvent("Step", 3, 1.0)])
    with pytest.raises(ConfigError):
        LaserModel("CavityStabilized", stabilization_gain_table=[(10, 100, -20), (50, 200, -10)])


def test_unambiguous_delay_enforced(desk_cfg):
    with pytest.raises(ConfigError):
        uniform_cable(8, 20.0).check_unambiguous(desk_cfg)
    uniform_cable(8, 10.0).check_unambiguous(desk_cfg)


def test_arbitrary_span_jones_reports_unitarity_deviation():
    assert SpanModel(jones=np.diag([1.0, 0.5])).unitarity_deviation == pytest.approx(0.75)


# --- laser ------------------------------------------------------------------


def test_zero_linewidth_gives_zero_phase():
    assert not np.any(synth_laser_phase(LaserModel(linewidth=0.0), 1024, 1e4, 1))


def test_laser_phase_is_seeded():
    m = LaserModel(linewidth=100.0)
    assert np.array_equal(synth_laser_phase(m, 4096, 1e4, 5), synth_laser_phase(m, 4096, 1e4, 5))
    assert not np.array_equal(synth_laser_phase(m, 4096, 1e4, 5), synth_laser_phase(m, 4096, 1e4, 6))


def test_free_running_white_fm_level():
    fs = 32768.0
    phi = synth_laser_phase(LaserModel(linewidth=100.0), 1 << 19, fs, 3)
    rep = frequency_noise_psd(phi, fs)
    target = 10 * math.log10(100 / math.pi)
    edges = [100 * 2**i for i in range(7)]  # octaves 100 Hz .. 6.4 kHz (+ the last to 10 kHz)
    edges[-1] = 10_000
    for lo, hi in zip(edges[:-1], edges[1:]):
        assert 10 * math.log10(band_mean(rep, lo, hi)) == pytest.approx(target, abs=2.0)


def test_stabilized_gain_table():
    cav = LaserModel("CavityStabilized")
    f = np.array([0.1, 0.5, 1.0, math.sqrt(10), 10, 100, 1000, 5000])
    assert np.allclose(cav.gain_db(f), [-10, -10, -10, -15, -20, -20, -20, -20])
    assert np.all(LaserModel().gain_db(f) == 0)


def test_stabilized_vs_free_at_100_hz():
    fs, n = 8192.0, 1 << 18
    free = frequency_noise_psd(synth_laser_phase(LaserModel(), n, fs, 9), fs)
    cav = frequency_noise_psd(synth_laser_phase(LaserModel("CavityStabilized"), n, fs, 9), fs)
    ratio = 10 * math.log10(band_mean(cav, 80, 125) / band_mean(free, 80, 125))
    assert ratio == pytest.approx(-20, abs=2)


def test_laser_track_interpolates_and_spans_run(fast_cfg):
    tr = LaserPhaseTrack.for_run(LaserModel(), -1e-3, 10e-3, fast_cfg, seed=1)
    assert tr.duration >= 10e-3
    grid = tr.t_start + np.arange(len(tr.phase)) / tr.rate
    assert np.allclose(tr(grid), tr.phase)


# --- propagation and calibration -------------------------------------------


def test_single_reflector_phase_oracle(desk_cfg):
    ev = PerturbationEvent("Step", 1, 0.7)
    cable = uniform_cable(1, events=[ev])
    probe = generate_sweep(desk_cfg, 0)
    cap = propagate(cable, probe, desk_cfg, adc=False, noise=False)
    nxt = propagate(cable, generate_sweep(desk_cfg, 1), desk_cfg, adc=False, noise=False)
    ir = matched_filter(cap, probe, nxt)
    tau = float(roundtrip_delay(cable, 1, 0.0))
    b = int(np.argmax(ir.power))
    assert b == round(tau * desk_cfg.sample_rate)
    want = -2 * np.pi * desk_cfg.if_center * tau + 1.4
    got = np.angle(ir.bins[0, b])
    assert abs(np.angle(np.exp(1j * (got - want)))) < 1e-3


def test_zero_repeaters_is_noise_only(desk_cfg):
    cable = CableModel([], [], extra_noise_density=1e-9)
    caps = list(simulate_captures(cable, desk_cfg, 2, seed=1))
    ir = matched_filter(caps[0], generate_sweep(desk_cfg, 0), caps[1])
    assert detect_peaks(ir, threshold_db=10) == []


def test_captures_are_reproducible(fast_cfg):
    cable = uniform_cable(3, 20.0).with_uniform_ase(1e-12)
    a = list(simulate_captures(cable, fast_cfg, 3, laser=LaserModel(), seed=4))
    b = list(simulate_captures(cable, fast_cfg, 3, laser=LaserModel(), seed=4))
    for x, y in zip(a, b):
        assert np.array_equal(x.channels, y.channels)
    # each sweep depends only on (seed, sweep index), not on generation order
    c = list(simulate_captures(cable, fast_cfg, 2, laser=LaserModel(), seed=4, start_sweep=1))
    assert not np.array_equal(c[0].channels, a[0].channels)


def test_probe_must_match_configuration(desk_cfg, fast_cfg):
    with pytest.raises(ConfigError):
        propagate(uniform_cable(1), generate_sweep(fast_cfg, 0), desk_cfg)


def _snr(cable, cfg, seed):
    caps = list(simulate_captures(cable, cfg, 2, seed=seed))
    ir = matched_filter(caps[0], generate_sweep(cfg, 0), caps[1])
    peaks = detect_peaks(ir, expected_delays(cable) * cfg.sample_rate, threshold_db=-np.inf)
    return estimate_snr(ir, peaks).snr_db


def test_calibration_hits_target_and_scales(desk_cfg):
    cable = uniform_cable(4)
    single = 2 * desk_cfg.sweep_period  # one same-launch sweep
    d30 = calibrate_noise_floor(cable, desk_cfg, 30.0, single, seed=3)
    assert np.median(_snr(cable.with_uniform_ase(d30), desk_cfg, 3)) == pytest.approx(30, abs=0.5)
    d33 = calibrate_noise_floor(cable, desk_cfg, 33.0, single, seed=3)
    assert d33 == pytest.approx(d30 / 2, rel=0.2)
    assert calibrate_noise_floor(cable, desk_cfg, 30.0, single, seed=3) == d30


def test_calibration_averaging_divides_by_equivalent_sweeps(desk_cfg):
    cable = uniform_cable(2)
    d1 = calibrate_noise_floor(cable, desk_cfg, 30.0, 2e-3, seed=3)  # W = 1
    d_avg = calibrate_noise_floor(cable, desk_cfg, 30.0, 0.032, seed=3)  # W = 16
    assert d_avg == pytest.approx(16 * d1, rel=0.05)


def test_doubling_density_costs_three_db(desk_cfg):
    cable = uniform_cable(4)
    d = calibrate_noise_floor(cable, desk_cfg, 30.0, 2e-3, seed=3)
    a = _snr(cable.with_uniform_ase(d), desk_cfg, 5)
    b = _snr(cable.with_uniform_ase(2 * d), desk_cfg, 5)
    assert np.median(a - b) == pytest.approx(3.0, abs=0.5)


def test_unreachable_target_reports_bound(desk_cfg):
    cable = uniform_cable(2)
    with pytest.raises(CalibrationError) as err:
        calibrate_noise_floor(cable, desk_cfg, 150.0)
    assert err.value.achieved_db < 150
    with pytest.raises(CalibrationError):
        calibrate_noise_floor(CableModel(), desk_cfg, 0.0)
