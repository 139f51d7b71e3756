"""Constant-power swept probe generation and converter quantization.

The probe is a complex, unit-modulus linear chirp centred on an intermediate
frequency. Each sweep restarts its phase (sawtooth sweep), and the launch
polarization alternates between sweeps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError


class Pol(str, enum.Enum):
    X = "X"
    Y = "Y"


class PolScheme(str, enum.Enum):
    TIME_INTERLEAVED = "TimeInterleaved"


@dataclass(frozen=True)
class SweepConfig:
    """Probe and sampling parameters.

    Defaults are the desk-scale operating point; the field-trial values
    (2 GS/s, 500 MHz IF, 125 MHz sweep) fit in the same structure.
    """

    sample_rate: float = 50e6
    if_center: float = 15e6
    sweep_bandwidth: float = 10e6
    sweep_period: float = 1e-3
    dac_bits: int = 14
    adc_bits: int = 14
    pol_scheme: PolScheme = PolScheme.TIME_INTERLEAVED
    guard_band: float = 0.5e6

    def __post_init__(self):
        object.__setattr__(self, "pol_scheme", PolScheme(self.pol_scheme))
        self.validate()

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate", "must be positive")
        if self.sweep_bandwidth <= 0:
            raise ConfigError("sweep_bandwidth", "must be positive")
        if self.sweep_period <= 0:
            raise ConfigError("sweep_period", "must be positive")
        if self.if_center - self.sweep_bandwidth / 2 <= 0:
            raise ConfigError("if_center", "sweep must stay at positive frequencies")
        if self.if_center + self.sweep_bandwidth / 2 >= self.sample_rate / 2:
            raise ConfigError(
                "if_center",
                "if_center + sweep_bandwidth/2 must be below sample_rate/2",
            )
        n = self.sweep_period * self.sample_rate
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ConfigError(
                "sweep_period",
                f"sweep_period * sample_rate = {n!r} is not a whole number of samples",
            )
        for name in ("dac_bits", "adc_bits"):
            bits = getattr(self, name)
            if not 2 <= int(bits) <= 16:
                raise ConfigError(name, "must lie in [2, 16]")
        if self.guard_band < 0:
            raise ConfigError("guard_band", "must be non-negative")

    @property
    def samples_per_sweep(self) -> int:
        return int(round(self.sweep_period * self.sample_rate))

    @property
    def sweep_rate(self) -> float:
        """Chirp rate in Hz/s."""
        return self.sweep_bandwidth / self.sweep_period

    @property
    def resolution_bins(self) -> float:
        """Width of one delay resolution cell (1/B) in samples."""
        return self.sample_rate / self.sweep_bandwidth


@dataclass(frozen=True, eq=False)
class ProbeWaveform:
    sweep_index: int
    launch_pol: Pol
    samples: np.ndarray
    cfg: SweepConfig | None = None


def pol_multiplex(cfg: SweepConfig, sweep_index: int) -> Pol:
    """Launch polarization for a sweep: X on even indices, Y on odd."""
    return Pol.X if sweep_index % 2 == 0 else Pol.Y


def chirp_phase(cfg: SweepConfig, t: np.ndarray) -> np.ndarray:
    """Probe phase in cycles at local sweep time ``t`` (seconds, in [0, T))."""
    gamma = cfg.sweep_rate
    return (cfg.if_center - cfg.sweep_bandwidth / 2) * t + 0.5 * gamma * t * t


def chirp_phase_wrapped(cfg: SweepConfig, t: np.ndarray) -> np.ndarray:
    """Same as :func:`chirp_phase`, reduced modulo one cycle.

    The linear and quadratic terms are reduced separately so long sweeps at
    high sample rates keep full double precision.
    """
    f0 = cfg.if_center - cfg.sweep_bandwidth / 2
    a = np.mod(f0 * t, 1.0)
    b = np.mod(0.5 * cfg.sweep_rate * t * t, 1.0)
    return np.mod(a + b, 1.0)


def generate_sweep(cfg: SweepConfig, sweep_index: int) -> ProbeWaveform:
    cfg.validate()
    n = cfg.samples_per_sweep
    t = np.arange(n) / cfg.sample_rate
    samples = np.exp(2j * np.pi * chirp_phase_wrapped(cfg, t))
    return ProbeWaveform(sweep_index, pol_multiplex(cfg, sweep_index), samples, cfg)


def instantaneous_frequency(cfg: SweepConfig, t: np.ndarray | float) -> np.ndarray:
    return cfg.if_center - cfg.sweep_bandwidth / 2 + cfg.sweep_rate * np.asarray(t)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(samples: np.ndarray, bits: int, full_scale: float) -> tuple[np.ndarray, int]:
    """Mid-tread uniform quantizer.

    Returns ``(codes, n_clipped)``. Codes lie in ``[-2**(bits-1), 2**(bits-1) - 1]``;
    ``full_scale`` maps to ``2**(bits-1)`` before clipping.
    """
    if not 2 <= bits <= 16:
        raise ValueError("bits must lie in [2, 16]")
    if full_scale <= 0:
        raise ValueError("full_scale must be positive")
    half = 2 ** (bits - 1)
    codes = round_half_away(np.asarray(samples, dtype=float) * (half / full_scale))
    lo, hi = -half, half - 1
    n_clipped = int(np.count_nonzero((codes < lo) | (codes > hi)))
    return np.clip(codes, lo, hi).astype(np.int32), n_clipped


def dac_output(probe: ProbeWaveform, cfg: SweepConfig) -> np.ndarray:
    """Probe after DAC quantization of the I and Q drive signals."""
    half = 2 ** (cfg.dac_bits - 1)
    i, _ = quantize(probe.samples.real, cfg.dac_bits, 1.0)
    q, _ = quantize(probe.samples.imag, cfg.dac_bits, 1.0)
    return (i + 1j * q) / half


def envelope_ripple_db(x: np.ndarray) -> float:
    mag = np.abs(x)
    return float(20 * math.log10(mag.max() / mag.min()))


def out_of_band_power_db(x: np.ndarray, cfg: SweepConfig, window: str = "hann") -> float:
    """Power outside ``[f_IF - B/2 - guard, f_IF + B/2 + guard]`` relative to total.

    A tapered window keeps the estimator's own leakage out of the figure; with
    ``window="boxcar"`` the result also contains the splatter of the sawtooth
    flyback between consecutive sweeps.
    """
    w = get_window(window, len(x))
    power = np.abs(np.fft.fft(x * w)) ** 2
    f = np.fft.fftfreq(len(x), 1 / cfg.sample_rate)
    lo = cfg.if_center - cfg.sweep_bandwidth / 2 - cfg.guard_band
    hi = cfg.if_center + cfg.sweep_bandwidth / 2 + cfg.guard_band
    outside = power[(f < lo) | (f > hi)].sum()
    return float(10 * math.log10(max(outside, 1e-300) / power.sum()))


def negative_frequency_power_db(x: np.ndarray, window: str = "hann") -> float:
    w = get_window(window, len(x))
    power = np.abs(np.fft.fft(x * w)) ** 2
    f = np.fft.fftfreq(len(x))
    return float(10 * math.log10(max(power[f < 0].sum(), 1e-300) / power.sum()))
