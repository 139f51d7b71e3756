import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofdr.analysis import (
    MIN_MOVEMENT_SAMPLES,
    band_mean,
    band_power,
    frequency_noise_psd,
    span_movement_report,
    spectrogram,
    write_psd_csv,
    write_series_csv,
    write_spectrogram,
)
from ofdr.dsp import PhaseSeries

FS = 500.0  # phase sampling rate of an interleaved desk run


def tone(n, f=1.0, amp=1.0, fs=FS):
    t = np.arange(n) / fs
    return amp * np.sin(2 * np.pi * f * t)


def series(phase, fs=FS, resets=()):
    n = len(phase)
    return PhaseSeries(1, np.arange(n) / fs, np.asarray(phase, float), np.arange(n),
                       np.asarray(resets, dtype=int))


# -- spectrogram ------------------------------------------------------------


def test_tone_ridge_within_one_bin():
    g = spectrogram(tone(20000), FS, window_len=1024)
    assert g.power_db.shape == (len(g.freqs), len(g.times))
    ridge = g.freqs[np.argmax(g.power_db, axis=0)]
    df = FS / 1024
    assert np.all(np.abs(ridge - 1.0) <= df)


def test_white_noise_grid_is_flat(rng):
    # 100 averages per cell: average 100 independent spectrograms
    cells = np.mean(
        [10 ** (spectrogram(rng.standard_normal(4096), FS, window_len=256).power_db / 10) for _ in range(100)],
        axis=0,
    )
    level = 2 / FS  # one-sided density of unit-variance white noise
    db = 10 * np.log10(cells / level)
    assert np.all(np.abs(db) <= 3.0)


def test_constant_series_leaves_display_band_at_floor():
    g = spectrogram(np.full(4096, 3.2), FS, window_len=256)
    assert g.freqs.min() > 0
    assert np.all(g.power_db <= -250)


def test_band_limits_and_axis():
    g = spectrogram(tone(4096), FS, window_len=512, band=(0.1, 10.0))
    assert g.freqs.min() >= 0.1 and g.freqs.max() <= 10.0
    g = spectrogram(tone(4096), FS, window_len=512, band=(0.1, 1e6))
    assert g.freqs.max() <= FS / 2


def test_short_series_raises():
    with pytest.raises(ValueError, match="shorter than one window"):
        spectrogram(np.zeros(100), FS, window_len=256)


def test_spectrogram_splits_at_resets():
    x = np.concatenate([tone(2048), 50 + tone(2048)])
    g = spectrogram(series(x, resets=[2048]), window_len=256, overlap=0)
    whole = spectrogram(tone(2048), FS, window_len=256, overlap=0)
    assert len(g.times) == 2 * len(whole.times)
    np.testing.assert_allclose(g.power_db[:, : len(whole.times)], whole.power_db, atol=1e-9)


def test_concatenation_property():
    a, b = tone(2048, 1.0), tone(2048, 3.0)
    ga = spectrogram(a, FS, window_len=256, overlap=0)
    gb = spectrogram(b, FS, window_len=256, overlap=0)
    gab = spectrogram(np.concatenate([a, b]), FS, window_len=256, overlap=0)
    np.testing.assert_allclose(gab.power_db, np.hstack([ga.power_db, gb.power_db]), atol=1e-9)


def test_spectrogram_pure(rng):
    x = rng.standard_normal(3000)
    g1 = spectrogram(x, FS)
    g2 = spectrogram(x.copy(), FS)
    np.testing.assert_array_equal(g1.power_db, g2.power_db)


# -- PSD --------------------------------------------------------------------


def white_fm_phase(n, s_nu, fs, rng):
    # white frequency noise of one-sided density s_nu, integrated to phase
    nu = rng.standard_normal(n) * math.sqrt(s_nu * fs / 2)
    return 2 * np.pi * np.cumsum(nu) / fs


def test_white_fm_recovered_flat(rng):
    s_nu = 31.8
    phi = white_fm_phase(2**18, s_nu, FS, rng)
    rep = frequency_noise_psd(phi, FS, n_segments=64)
    for lo in (1, 4, 16, 64):
        level = band_mean(rep, lo, 2 * lo)
        assert 10 * np.log10(level / s_nu) == pytest.approx(0, abs=2)


def test_zero_series_zero_psd():
    rep = frequency_noise_psd(np.zeros(4096), FS)
    assert np.all(rep.s_phi == 0) and np.all(rep.s_nu == 0)
    assert rep.parseval_ratio == 1.0


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31), color=st.sampled_from(["white", "red"]))
def test_parseval_within_5_percent(seed, color):
    r = np.random.default_rng(seed)
    x = r.standard_normal(8192)
    if color == "red":
        x = np.convolve(x, np.ones(8) / 8, mode="same")
    rep = frequency_noise_psd(x, FS)
    assert rep.parseval_ratio == pytest.approx(1, abs=0.05)
    assert np.all(rep.s_phi >= 0)


def test_psd_metadata():
    rep = frequency_noise_psd(tone(8192), FS)
    m = rep.metadata()
    assert m["n_averages"] == 8
    assert m["resolution_hz"] == pytest.approx(FS / rep.nperseg)


def test_psd_splits_at_resets(rng):
    x = rng.standard_normal(8192)
    jumped = x.copy()
    jumped[4096:] += 1e3
    split = frequency_noise_psd(series(jumped, resets=[4096]), nperseg=512)
    pieces = frequency_noise_psd(series(x, resets=[4096]), nperseg=512)
    np.testing.assert_allclose(split.s_phi, pieces.s_phi, rtol=1e-9)
    assert split.meta["n_records"] == 2


def test_psd_too_short():
    with pytest.raises(ValueError):
        frequency_noise_psd(np.zeros(20), FS)


# -- band power -------------------------------------------------------------


def test_tone_band_power():
    frac = band_power(tone(20000), FS, 0.5, 2.0, linear=True, nperseg=2048)
    assert frac >= 0.95


def test_empty_band():
    assert band_power(tone(4096), FS, 1.0, 1.0, linear=True) == 0.0
    assert band_power(tone(4096), FS, 1.0, 1.0) == -math.inf


def test_white_half_band(rng):
    db = band_power(rng.standard_normal(2**16), FS, 0, FS / 4)
    assert db == pytest.approx(-3.0, abs=0.5)


@pytest.mark.parametrize("lo,hi", [(-1, 10), (0, FS), (10, 5)])
def test_band_outside_nyquist(lo, hi):
    with pytest.raises(ValueError, match="outside"):
        band_power(tone(4096), FS, lo, hi)


# -- movement ---------------------------------------------------------------


def delay_series(ks, n, drifts, noise_ns, rng, fs=2.0):
    """Round-trip delays where span k stretches by ``drifts[k](t)`` ns."""
    t = np.arange(n) / fs
    span = {k: drifts.get(k, lambda t: 0 * t)(t) for k in range(1, max(ks) + 1)}
    out, acc = {}, np.zeros(n)
    for k in range(1, max(ks) + 1):
        acc = acc + 2 * span[k]
        if k in ks:
            out[k] = (t, (1e5 * k + acc + noise_ns * rng.standard_normal(n)) * 1e-9)
    return out


def test_opposite_drifts_flagged(rng):
    step = lambda t: 2.5 * (1 + np.tanh((t - t.mean()) / 20)) / 2
    s = delay_series(range(1, 13), 400, {10: step, 11: lambda t: -step(t)}, 0.05, rng)
    rep = span_movement_report(s)
    pairs = {(a, b): r for a, b, r in rep.flagged}
    assert (10, 11) in pairs and pairs[(10, 11)] < -0.9
    i = rep.ks.index(10)
    assert rep.movement_ns[i] == pytest.approx(5, abs=0.5)
    assert rep.movement_ns[i + 1] == pytest.approx(-5, abs=0.5)


def test_common_mode_drift_not_flagged(rng):
    t = np.arange(200) / 2.0
    base = {k: (t, (1e-4 * k + 3e-9 * np.sin(0.1 * t))) for k in range(1, 9)}
    rep = span_movement_report(base)
    assert rep.flagged == []
    # the repeater delays themselves all move together
    d = np.array([base[k][1] for k in range(1, 9)])
    assert np.all(np.corrcoef(d) > 0.999)


def test_quiet_spans_within_noise_bound(rng):
    rep = span_movement_report(delay_series(range(1, 9), 300, {}, 0.1, rng))
    assert rep.flagged == []
    assert np.all(np.abs(rep.movement_ns) < rep.movement_bound_ns)


def test_movement_needs_32_samples(rng):
    with pytest.raises(ValueError, match="32"):
        span_movement_report(delay_series([1, 2], MIN_MOVEMENT_SAMPLES - 1, {}, 0.1, rng))
    with pytest.raises(ValueError):
        span_movement_report({})


def test_movement_aligns_common_timestamps(rng):
    s = delay_series([1, 2, 3], 100, {}, 0.1, rng)
    t, d = s[2]
    s[2] = (t[5:], d[5:])
    rep = span_movement_report(s)
    assert len(rep.t) == 95
    assert json.dumps(rep.summary())


# -- writers ----------------------------------------------------------------


def test_csv_writers(tmp_path):
    s = series(tone(600))
    p = write_series_csv(tmp_path / "phase.csv", s)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["time_s", "sweep_index", "phase_rad"]
    assert len(rows) == 601 and float(rows[3][2]) == s.phase[2]
    rep = frequency_noise_psd(s.phase, FS)
    rows = list(csv.reader(write_psd_csv(tmp_path / "psd.csv", rep).open()))
    assert rows[0][0] == "freq_hz" and len(rows) == len(rep.freqs) + 1


def test_spectrogram_matrix_and_sidecar(tmp_path):
    g = spectrogram(tone(4096), FS, window_len=512)
    c, j = write_spectrogram(tmp_path / "spec_k3", g)
    rows = list(csv.reader(c.open()))
    assert len(rows) == len(g.freqs) + 1 and len(rows[0]) == len(g.times) + 1
    meta = json.loads(j.read_text())
    assert meta["window"] == "hann" and meta["window_len"] == 512
    assert len(meta["freqs_hz"]) == len(g.freqs)
