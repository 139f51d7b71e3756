import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofdr.errors import ConfigError
from ofdr.waveform import (
    Pol,
    SweepConfig,
    chirp_phase,
    chirp_phase_wrapped,
    dac_output,
    envelope_ripple_db,
    generate_sweep,
    instantaneous_frequency,
    negative_frequency_power_db,
    out_of_band_power_db,
    pol_multiplex,
    quantize,
)

from .oracles import sqnr_db


def test_desk_sweep_length_and_modulus(desk_cfg):
    p = generate_sweep(desk_cfg, 0)
    assert len(p.samples) == 50_000
    assert np.all(np.abs(p.samples) == pytest.approx(1.0, abs=1e-15))
    assert envelope_ripple_db(p.samples) == pytest.approx(0.0, abs=1e-12)


def test_instantaneous_frequency_endpoints(desk_cfg):
    assert instantaneous_frequency(desk_cfg, 0.0) == pytest.approx(10e6)
    assert instantaneous_frequency(desk_cfg, desk_cfg.sweep_period) == pytest.approx(20e6)


def test_phase_matches_defining_formula(desk_cfg):
    t = np.arange(desk_cfg.samples_per_sweep) / desk_cfg.sample_rate
    g = desk_cfg.sweep_rate
    cycles = desk_cfg.if_center * t + 0.5 * g * t * t - 0.5 * desk_cfg.sweep_bandwidth * t
    assert np.allclose(chirp_phase(desk_cfg, t), cycles)
    ref = np.exp(2j * np.pi * cycles)
    assert np.max(np.abs(generate_sweep(desk_cfg, 3).samples - ref)) < 1e-6
    assert np.allclose(np.exp(2j * np.pi * chirp_phase_wrapped(desk_cfg, t)), ref, atol=1e-6)


def test_finite_difference_frequency_ramps_linearly(desk_cfg):
    s = generate_sweep(desk_cfg, 0).samples
    f = np.angle(s[1:] * np.conj(s[:-1])) * desk_cfg.sample_rate / (2 * np.pi)
    t = (np.arange(len(f)) + 0.5) / desk_cfg.sample_rate
    assert np.max(np.abs(f - instantaneous_frequency(desk_cfg, t))) < 1.0


@pytest.mark.parametrize("m,pol", [(0, Pol.X), (1, Pol.Y), (7, Pol.Y), (10, Pol.X)])
def test_pol_multiplex(desk_cfg, m, pol):
    assert pol_multiplex(desk_cfg, m) == pol
    assert generate_sweep(desk_cfg, m).launch_pol == pol


def test_sweeps_are_pure_functions(desk_cfg):
    a, b = generate_sweep(desk_cfg, 4), generate_sweep(desk_cfg, 4)
    assert np.array_equal(a.samples, b.samples)


def test_out_of_band_and_sideband(desk_cfg):
    p = generate_sweep(desk_cfg, 0)
    assert out_of_band_power_db(p.samples, desk_cfg) < -60
    assert negative_frequency_power_db(p.samples) < -60
    q = dac_output(p, desk_cfg)
    assert envelope_ripple_db(q) < 0.1
    assert out_of_band_power_db(q, desk_cfg) < -60


@pytest.mark.parametrize(
    "field,kw",
    [
        ("if_center", dict(if_center=24e6)),
        ("sweep_period", dict(sweep_period=1.00001e-3)),
        ("sweep_bandwidth", dict(sweep_bandwidth=0)),
        ("sweep_period", dict(sweep_period=-1)),
        ("adc_bits", dict(adc_bits=20)),
    ],
)
def test_invalid_configs_name_the_field(field, kw):
    with pytest.raises(ConfigError) as err:
        SweepConfig(**kw)
    assert err.value.field == field


def test_quantize_examples():
    codes, clipped = quantize(np.array([0.0, 1.0, -1.0, 0.5 / 8192, -0.5 / 8192]), 14, 1.0)
    assert codes.tolist() == [0, 8191, -8192, 1, -1]
    assert clipped == 1


def test_quantize_sine_sqnr():
    n = 1 << 16
    x = 0.5 * np.sin(2 * np.pi * 1021.3 * np.arange(n) / n)  # -6 dBFS
    codes, clipped = quantize(x, 14, 1.0)
    assert clipped == 0
    expected = 6.02 * 14 + 1.76 - 6.02
    assert sqnr_db(x, codes / 8192) == pytest.approx(expected, abs=1.0)


@given(st.integers(2, 16), st.lists(st.floats(-3, 3), min_size=1, max_size=64))
def test_quantize_range_and_monotone(bits, values):
    x = np.sort(np.array(values))
    codes, clipped = quantize(x, bits, 1.0)
    half = 2 ** (bits - 1)
    assert codes.min() >= -half and codes.max() <= half - 1
    assert np.all(np.diff(codes) >= 0)
    assert clipped == int(np.sum((np.abs(x) * half >= half + 0.5) | (x * half >= half - 0.5)))


@given(st.floats(-0.99, 0.99))
def test_quantize_error_is_half_lsb(v):
    code, _ = quantize(np.array([v]), 14, 1.0)
    assert abs(code[0] / 8192 - v) <= 0.5 / 8192 + 1e-15


def test_quantize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        quantize(np.zeros(2), 1, 1.0)
    with pytest.raises(ValueError):
        quantize(np.zeros(2), 8, 0.0)


def test_autocorrelation_half_width(fast_cfg):
    s = generate_sweep(fast_cfg, 0).samples
    ac = np.abs(np.fft.ifft(np.abs(np.fft.fft(s)) ** 2))
    ac /= ac[0]
    lobe = np.argmax(ac[1:] < 1e-2) + 1  # first near-null
    half_width = fast_cfg.sample_rate / fast_cfg.sweep_bandwidth
    assert abs(lobe - half_width) <= 1
    # pulse compression: the main lobe is 1/B wide regardless of sweep length
    assert ac[int(half_width) // 2] > 0.5
