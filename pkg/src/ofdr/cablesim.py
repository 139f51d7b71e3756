"""Repeatered cable with high-loss loopbacks, laser noise and perturbations.

Repeater ``k`` (1-based) sits at the end of span ``k``. Its loopback couples
a small part of the forward light into the return fiber, so every repeater
appears as a discrete reflector at the round-trip delay through spans
``1..k``. Perturbations (phase tones, delay drift, polarization rotation)
are attached to spans; integrated quantities at repeater ``k`` are prefix
sums over spans.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dsp import SweepCapture
from .errors import CalibrationError, ConfigError
from .waveform import (
    Pol,
    ProbeWaveform,
    SweepConfig,
    chirp_phase_wrapped,
    generate_sweep,
    pol_multiplex,
    quantize,
)

C_KM_S = 299792.458
ADC_HEADROOM = 4.0


# ---------------------------------------------------------------------------
# Laser


class LaserKind(str, enum.Enum):
    FREE_RUNNING = "FreeRunningFiber"
    CAVITY = "CavityStabilized"


# (f_lo, f_hi, dB) bands; log-frequency interpolation between bands
DEFAULT_STABILIZATION = ((0.0, 1.0, -10.0), (10.0, 1000.0, -20.0))


@dataclass(frozen=True)
class LaserModel:
    kind: LaserKind = LaserKind.FREE_RUNNING
    linewidth: float = 100.0
    flicker_coefficient: float = 0.0
    stabilization_gain_table: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", LaserKind(self.kind))
        table = tuple(tuple(float(v) for v in band) for band in self.stabilization_gain_table)
        if self.kind == LaserKind.CAVITY and not table:
            table = DEFAULT_STABILIZATION
        object.__setattr__(self, "stabilization_gain_table", table)
        if self.linewidth < 0:
            raise ConfigError("laser.linewidth", "must be non-negative")
        if self.flicker_coefficient < 0:
            raise ConfigError("laser.flicker_coefficient", "must be non-negative")
        prev_hi = -math.inf
        for lo, hi, _ in table:
            if not lo < hi or lo < prev_hi:
                raise ConfigError(
                    "laser.stabilization_gain_table", "bands must be ordered and non-overlapping"
                )
            prev_hi = hi

    def gain_db(self, f: np.ndarray) -> np.ndarray:
        """Frequency-noise reduction in dB (0 for a free-running laser)."""
        f = np.asarray(f, dtype=float)
        if self.kind == LaserKind.FREE_RUNNING or not self.stabilization_gain_table:
            return np.zeros_like(f)
        table = self.stabilization_gain_table
        out = np.full_like(f, table[0][2])
        for lo, hi, g in table:
            out[(f >= lo) & (f <= hi)] = g
        for (lo0, hi0, g0), (lo1, hi1, g1) in zip(table[:-1], table[1:]):
            between = (f > hi0) & (f < lo1)
            if hi0 > 0:
                x = (np.log10(f[between]) - math.log10(hi0)) / (math.log10(lo1) - math.log10(hi0))
            else:
                x = (f[between] - hi0) / (lo1 - hi0)
            out[between] = g0 + x * (g1 - g0)
        out[f > table[-1][1]] = table[-1][2]
        return out

    def frequency_noise_psd(self, f: np.ndarray) -> np.ndarray:
        """One-sided frequency-noise PSD in Hz^2/Hz."""
        f = np.asarray(f, dtype=float)
        with np.errstate(divide="ignore"):
            s = self.linewidth / np.pi + np.where(f > 0, self.flicker_coefficient / np.where(f > 0, f, 1), 0.0)
        return s * 10 ** (self.gain_db(f) / 10)


def synth_laser_phase(model: LaserModel, n_samples: int, fs: float, seed: int) -> np.ndarray:
    """Laser phase (rad) with the model's frequency-noise PSD.

    Spectral synthesis: complex Gaussian bins shaped by ``sqrt(S_phi)`` with
    ``S_phi = S_nu / f^2``, DC removed. The record is periodic over its
    length.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    f = np.fft.rfftfreq(n_samples, 1 / fs)
    s_phi = np.zeros_like(f)
    pos = f > 0
    s_phi[pos] = model.frequency_noise_psd(f[pos]) / f[pos] ** 2
    if not np.any(s_phi):
        return np.zeros(n_samples)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(len(f)) + 1j * rng.standard_normal(len(f))
    # one-sided PSD estimate of irfft output is 2|X|^2/(n fs) on interior bins
    amp = np.sqrt(s_phi * n_samples * fs / 4.0)
    spec = z * amp
    if n_samples % 2 == 0:
        spec[-1] = z[-1].real * math.sqrt(s_phi[-1] * n_samples * fs / 2.0)
    return np.fft.irfft(spec, n_samples)


@dataclass(frozen=True, eq=False)
class LaserPhaseTrack:
    """Continuous laser phase over a run, sampled at ``rate`` and interpolated.

    Frequency noise above ``rate/2`` is not represented; at the default of
    32 samples per sweep this omits a negligible share of the residual phase
    for round trips below one sweep period.
    """

    phase: np.ndarray
    rate: float
    t_start: float = 0.0

    @classmethod
    def for_run(cls, model: LaserModel | None, t_start: float, duration: float,
                cfg: SweepConfig, seed: int, per_sweep: int = 32) -> "LaserPhaseTrack":
        rate = per_sweep / cfg.sweep_period
        n = max(int(math.ceil(duration * rate)) + 1, 4)
        if model is None:
            return cls(np.zeros(n), rate, t_start)
        return cls(synth_laser_phase(model, n, rate, seed), rate, t_start)

    @property
    def duration(self) -> float:
        return len(self.phase) / self.rate

    def __call__(self, t: np.ndarray) -> np.ndarray:
        n = len(self.phase)
        x = np.mod((np.asarray(t) - self.t_start) * self.rate, n)
        # np.interp(period=...) re-sorts the whole track on every call
        i = np.minimum(x.astype(np.int64), n - 1)
        frac = x - i
        nxt = np.where(i + 1 < n, i + 1, 0)
        return self.phase[i] + frac * (self.phase[nxt] - self.phase[i])


# ---------------------------------------------------------------------------
# Cable


class EventKind(str, enum.Enum):
    SINUSOID = "Sinusoid"
    LINEAR_DRIFT_NS = "LinearDriftNs"
    RANDOM_WALK = "RandomWalk"
    STEP = "Step"
    CHIRP = "Chirp"


class EventTarget(str, enum.Enum):
    PHASE = "phase"
    DELAY = "delay"
    POLARIZATION = "polarization"


@dataclass(frozen=True)
class PerturbationEvent:
    """Time-varying perturbation of one span (per pass through the span).

    Amplitude is in rad for phase and polarization targets and ns for delay.
    LinearDriftNs ramps over [start, stop] and holds its final value; Step
    holds from start until stop; the oscillating kinds are active only
    within [start, stop). RandomWalk amplitude is the rms growth per
    square-root second.
    """

    kind: EventKind
    span_index: int
    amplitude: float
    frequency: float = 0.0
    start: float = 0.0
    stop: float = math.inf
    target: EventTarget | None = None
    frequency_end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        target = self.target
        if target is None:
            target = EventTarget.DELAY if self.kind == EventKind.LINEAR_DRIFT_NS else EventTarget.PHASE
        object.__setattr__(self, "target", EventTarget(target))
        if not self.start < self.stop:
            raise ConfigError("events.start", "start must be before stop")
        if self.kind == EventKind.LINEAR_DRIFT_NS and not math.isfinite(self.stop):
            raise ConfigError("events.stop", "LinearDriftNs needs a finite stop")

    def value(self, t: np.ndarray | float, seed: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        active = (t >= self.start) & (t < self.stop)
        tau = t - self.start
        if self.kind == EventKind.SINUSOID:
            v = self.amplitude * np.sin(2 * np.pi * self.frequency * tau)
            return np.where(active, v, 0.0)
        if self.kind == EventKind.CHIRP:
            f1 = self.frequency if self.frequency_end is None else self.frequency_end
            span = self.stop - self.start if math.isfinite(self.stop) else 1.0
            rate = (f1 - self.frequency) / span
            v = self.amplitude * np.sin(2 * np.pi * (self.frequency * tau + 0.5 * rate * tau * tau))
            return np.where(active, v, 0.0)
        if self.kind == EventKind.STEP:
            return np.where(active, self.amplitude, 0.0)
        if self.kind == EventKind.LINEAR_DRIFT_NS:
            frac = np.clip(tau / (self.stop - self.start), 0.0, 1.0)
            return self.amplitude * frac
        return self._random_walk(t, seed)

    def _random_walk(self, t: np.ndarray, seed: int) -> np.ndarray:
        dt = 1e-3
        tt = np.clip(t, self.start, self.stop) - self.start
        n = int(np.ceil(np.max(tt, initial=0.0) / dt)) + 2
        rng = np.random.default_rng([seed, self.span_index, 0x5eed])
        walk = np.concatenate([[0.0], np.cumsum(rng.standard_normal(n - 1))]) * self.amplitude * math.sqrt(dt)
        return np.interp(tt / dt, np.arange(n), walk)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def random_unitary(rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def unitarity_deviation(j: np.ndarray) -> float:
    return float(np.max(np.abs(j.conj().T @ j - np.eye(2))))


@dataclass(frozen=True, eq=False)
class SpanModel:
    length_km: float = 10.0
    group_index: float = 1.468
    loss_db: float | None = None  # default 0.2 dB/km
    jones: np.ndarray = field(default_factory=lambda: np.eye(2, dtype=complex))
    jones_return: np.ndarray | None = None

    def __post_init__(self):
        if self.length_km <= 0:
            raise ConfigError("cable.spans.length_km", "must be positive")
        if self.loss_db is None:
            object.__setattr__(self, "loss_db", 0.2 * self.length_km)
        if self.loss_db < 0:
            raise ConfigError("cable.spans.loss_db", "must be non-negative")
        object.__setattr__(self, "jones", np.asarray(self.jones, dtype=complex).reshape(2, 2))
        if self.jones_return is not None:
            object.__setattr__(self, "jones_return", np.asarray(self.jones_return, dtype=complex).reshape(2, 2))

    @property
    def one_way_delay(self) -> float:
        return self.length_km * self.group_index / C_KM_S

    @property
    def unitarity_deviation(self) -> float:
        devs = [unitarity_deviation(self.jones)]
        if self.jones_return is not None:
            devs.append(unitarity_deviation(self.jones_return))
        return max(devs)


@dataclass(frozen=True)
class RepeaterModel:
    gain_db: float = 2.0
    hllb_coupling_db: float = -45.0
    ase_noise_density: float = 0.0

    def __post_init__(self):
        if self.hllb_coupling_db > 0:
            raise ConfigError("cable.repeaters.hllb_coupling_db", "must be <= 0 dB")
        if self.gain_db < 0:
            raise ConfigError("cable.repeaters.gain_db", "must be >= 0 dB")
        if self.ase_noise_density < 0:
            raise ConfigError("cable.repeaters.ase_noise_density", "must be non-negative")


@dataclass(frozen=True, eq=False)
class CableModel:
    """Ordered spans and repeaters plus the perturbations acting on them.

    ``return_correlation`` is the fraction of each forward-path perturbation
    also seen on the return fiber of the pair. With ``couple_delay_phase``
    a delay drift also shifts the optical phase by ``2*pi*carrier_hz*drift``
    per pass.
    """

    spans: tuple = ()
    repeaters: tuple = ()
    seed: int = 0
    events: tuple = ()
    return_correlation: float = 1.0
    couple_delay_phase: bool = False
    carrier_hz: float = 193.4e12
    extra_noise_density: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        object.__setattr__(self, "repeaters", tuple(self.repeaters))
        object.__setattr__(self, "events", tuple(self.events))
        if len(self.spans) != len(self.repeaters):
            raise ConfigError("cable.repeaters", "need exactly one repeater per span")
        if not 0.0 <= self.return_correlation <= 1.0:
            raise ConfigError("cable.return_correlation", "must lie in [0, 1]")
        if self.extra_noise_density < 0:
            raise ConfigError("noise.extra_density", "must be non-negative")
        for ev in self.events:
            if not 1 <= ev.span_index <= len(self.spans):
                raise ConfigError("events.span_index", f"span {ev.span_index} does not exist")

    @property
    def n_repeaters(self) -> int:
        return len(self.spans)

    def _check_k(self, k: int) -> None:
        if not 0 <= k <= self.n_repeaters:
            raise IndexError(f"repeater index {k} outside 0..{self.n_repeaters}")

    def _span_events(self, i: int, target: EventTarget):
        return [e for e in self.events if e.span_index == i and e.target == target]

    def span_perturbation(self, i: int, target: EventTarget, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        v = np.zeros_like(t)
        for j, ev in enumerate(self._span_events(i, target)):
            v = v + ev.value(t, seed=self.seed * 1000 + j)
        return v

    def span_drift_ns(self, i: int, t) -> np.ndarray:
        return self.span_perturbation(i, EventTarget.DELAY, t)

    def span_phase(self, i: int, t) -> np.ndarray:
        """One-pass phase of span ``i`` (rad)."""
        p = self.span_perturbation(i, EventTarget.PHASE, t)
        if self.couple_delay_phase:
            p = p + 2 * np.pi * self.carrier_hz * self.span_drift_ns(i, t) * 1e-9
        return p

    def echo_amplitude(self, k: int) -> float:
        """Field amplitude of repeater ``k``'s loopback echo for unit launch."""
        self._check_k(k)
        if k == 0:
            return 0.0
        net = sum(r.gain_db - s.loss_db for s, r in zip(self.spans[:k], self.repeaters[:k]))
        return 10 ** ((2 * net + self.repeaters[k - 1].hllb_coupling_db) / 20)

    def noise_density(self) -> float:
        """White noise density at the receiver (relative power per Hz).

        ASE from each return amplifier reaches the terminal through its own
        span and the net gain of the spans before it.
        """
        total = self.extra_noise_density
        net = 0.0
        for s, r in zip(self.spans, self.repeaters):
            total += r.ase_noise_density * 10 ** ((net - s.loss_db) / 10)
            net += r.gain_db - s.loss_db
        return total

    def with_uniform_ase(self, density: float) -> "CableModel":
        reps = tuple(replace(r, ase_noise_density=density) for r in self.repeaters)
        return replace(self, repeaters=reps)

    def with_attenuation(self, k: int, extra_db: float) -> "CableModel":
        """Lower repeater ``k``'s loopback coupling by ``extra_db`` (fault injection)."""
        reps = list(self.repeaters)
        r = reps[k - 1]
        reps[k - 1] = replace(r, hllb_coupling_db=r.hllb_coupling_db - extra_db)
        return replace(self, repeaters=tuple(reps))

    def max_roundtrip(self) -> float:
        drift = 0.0
        for ev in self.events:
            if ev.target == EventTarget.DELAY:
                if ev.kind in (EventKind.LINEAR_DRIFT_NS, EventKind.STEP, EventKind.SINUSOID, EventKind.CHIRP):
                    drift += abs(ev.amplitude)
        nominal = 2 * sum(s.one_way_delay for s in self.spans)
        return nominal + (1 + self.return_correlation) * drift * 1e-9

    def check_unambiguous(self, cfg: SweepConfig) -> None:
        if self.max_roundtrip() >= cfg.sweep_period:
            raise ConfigError(
                "cable",
                f"round trip {self.max_roundtrip() * 1e3:.3f} ms to the last repeater "
                f"is not shorter than the sweep period {cfg.sweep_period * 1e3:.3f} ms",
            )


def roundtrip_delay(cable: CableModel, k: int, t: float | np.ndarray) -> np.ndarray:
    cable._check_k(k)
    t = np.asarray(t, dtype=float)
    tau = np.zeros_like(t)
    both = 1.0 + cable.return_correlation
    for i in range(1, k + 1):
        tau = tau + 2 * cable.spans[i - 1].one_way_delay + both * cable.span_drift_ns(i, t) * 1e-9
    return tau


def roundtrip_phase(cable: CableModel, k: int, t: float | np.ndarray) -> np.ndarray:
    cable._check_k(k)
    t = np.asarray(t, dtype=float)
    phi = np.zeros_like(t)
    both = 1.0 + cable.return_correlation
    for i in range(1, k + 1):
        phi = phi + both * cable.span_phase(i, t)
    return phi


def roundtrip_jones(cable: CableModel, k: int, t: float) -> np.ndarray:
    """Polarization transfer to repeater ``k`` and back (loopback coupling = identity).

    Forward light crosses spans 1..k, the return light spans k..1:
    ``J = Jr_1 ... Jr_k  @  Jf_k ... Jf_1``.
    """
    cable._check_k(k)
    fwd = np.eye(2, dtype=complex)
    ret = np.eye(2, dtype=complex)
    rho = cable.return_correlation
    for i in range(1, k + 1):
        span = cable.spans[i - 1]
        theta = float(cable.span_perturbation(i, EventTarget.POLARIZATION, t))
        jf = rotation(theta) @ span.jones
        jr_base = span.jones if span.jones_return is None else span.jones_return
        jr = rotation(rho * theta) @ jr_base
        fwd = jf @ fwd
        ret = ret @ jr
    return ret @ fwd


def _path_states(cable: CableModel, t: float):
    """Round-trip (delay, phase, Jones) for k = 1..K in one cumulative pass.

    Same summation order as :func:`roundtrip_delay`, :func:`roundtrip_phase`
    and :func:`roundtrip_jones`, so the values are bit-identical.
    """
    t = np.asarray(t, dtype=float)
    both = 1.0 + cable.return_correlation
    rho = cable.return_correlation
    tau = np.zeros_like(t)
    phi = np.zeros_like(t)
    fwd = np.eye(2, dtype=complex)
    ret = np.eye(2, dtype=complex)
    out = []
    for i in range(1, cable.n_repeaters + 1):
        span = cable.spans[i - 1]
        tau = tau + 2 * span.one_way_delay + both * cable.span_drift_ns(i, t) * 1e-9
        phi = phi + both * cable.span_phase(i, t)
        theta = float(cable.span_perturbation(i, EventTarget.POLARIZATION, t))
        jr_base = span.jones if span.jones_return is None else span.jones_return
        fwd = (rotation(theta) @ span.jones) @ fwd
        ret = ret @ (rotation(rho * theta) @ jr_base)
        out.append((float(tau), float(phi), ret @ fwd))
    return out


# ---------------------------------------------------------------------------
# Propagation


def _sweep_rng(seed: int, sweep_index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, sweep_index & 0xFFFFFFFFFFFF, 0xCAB1E])


def propagate(
    cable: CableModel,
    probe: ProbeWaveform,
    cfg: SweepConfig,
    *,
    laser: LaserModel | LaserPhaseTrack | None = None,
    t0: float | None = None,
    seed: int = 0,
    adc: bool = True,
    noise: bool = True,
) -> SweepCapture:
    """Digitized heterodyne capture of one sweep period.

    Each repeater contributes the launched chirp delayed by its round trip,
    scaled by the loopback echo amplitude, rotated by its round-trip Jones
    matrix, and carrying its path phase plus the self-heterodyne laser phase
    ``phi_L(t) - phi_L(t - tau)``. The first ``tau`` of the window holds the
    tail of the previous sweep, which was launched on the other polarization.
    Path phase, delay and Jones matrix are evaluated at the sweep midpoint.

    Noise is white Gaussian at the cable's receiver density; ``adc`` applies
    the ADC model at ``cfg.adc_bits``.
    """
    n = cfg.samples_per_sweep
    if len(probe.samples) != n:
        raise ConfigError(
            "sample_rate", f"probe has {len(probe.samples)} samples but the configuration needs {n}"
        )
    if probe.cfg is not None and probe.cfg != cfg:
        raise ConfigError("sweep", "probe was generated with a different sweep configuration")
    m = probe.sweep_index
    T = cfg.sweep_period
    t0 = m * T if t0 is None else t0
    t_local = np.arange(n) / cfg.sample_rate
    t = t0 + t_local
    tmid = t0 + T / 2

    if isinstance(laser, LaserModel):
        track = LaserPhaseTrack.for_run(laser, t0 - T, 2 * T, cfg, seed=[seed, m, 0x1A5E])
    else:
        track = laser
    phi_now = track(t) if track is not None else None

    pol_cur = 0 if pol_multiplex(cfg, m) == Pol.X else 1
    pol_old = 0 if pol_multiplex(cfg, m - 1) == Pol.X else 1
    f0 = cfg.if_center - cfg.sweep_bandwidth / 2
    states = _path_states(cable, tmid)
    x = np.zeros((2, n))
    total_power = 0.0
    if states:
        taus = np.array([st[0] for st in states])
        amps = np.array([cable.echo_amplitude(k) for k in range(1, len(states) + 1)])
        jk = amps[:, None, None] * np.array([st[2] for st in states])
        # the window holds the previous sweep's tail for the first tau seconds
        local = t_local[None, :] - taus[:, None]
        prev = local < 0
        local[prev] += T
        theta = 2 * np.pi * (f0 * local + 0.5 * cfg.sweep_rate * local * local)
        theta += np.array([st[1] for st in states])[:, None]
        if phi_now is not None:
            theta += phi_now - track(t[None, :] - taus[:, None])
        c, s = np.cos(theta), np.sin(theta)
        for col, mask in ((pol_old, prev), (pol_cur, ~prev)):
            v = jk[:, :, col]
            x += v.real.T @ np.where(mask, c, 0.0) - v.imag.T @ np.where(mask, s, 0.0)
        total_power = float(np.sum(0.5 * amps**2))

    sigma2 = cable.noise_density() * cfg.sample_rate / 2 if noise else 0.0
    if sigma2 > 0:
        x = x + math.sqrt(sigma2) * _sweep_rng(seed, m).standard_normal((2, n))
    total_power += 2 * sigma2

    clips = 0
    bits = None
    if adc:
        bits = cfg.adc_bits
        full_scale = ADC_HEADROOM * math.sqrt(total_power) if total_power > 0 else 1.0
        half = 2 ** (bits - 1)
        codes, clips = quantize(x, bits, full_scale)
        x = codes / half
    return SweepCapture(m, pol_multiplex(cfg, m), t0, x, bits, clips)


def run_laser_track(
    cfg: SweepConfig, laser: LaserModel | None, n_sweeps: int, seed: int, start_sweep: int = 0
) -> LaserPhaseTrack | None:
    """Laser phase covering sweeps ``start_sweep - 1 .. start_sweep + n_sweeps``.

    Built once per run and shared by every sweep, so parallel and serial
    generation see the same phase.
    """
    if laser is None:
        return None
    T = cfg.sweep_period
    return LaserPhaseTrack.for_run(laser, (start_sweep - 1) * T, (n_sweeps + 2) * T, cfg, seed=seed ^ 0x1A5E)


def simulate_captures(
    cable: CableModel,
    cfg: SweepConfig,
    n_sweeps: int,
    *,
    laser: LaserModel | None = None,
    seed: int = 0,
    start_sweep: int = 0,
    adc: bool = True,
):
    """Generate a contiguous run of captures with a continuous laser phase."""
    cable.check_unambiguous(cfg)
    track = run_laser_track(cfg, laser, n_sweeps, seed, start_sweep)
    samples = generate_sweep(cfg, start_sweep).samples
    for m in range(start_sweep, start_sweep + n_sweeps):
        probe = ProbeWaveform(m, pol_multiplex(cfg, m), samples, cfg)
        yield propagate(cable, probe, cfg, laser=track, seed=seed, adc=adc)


# ---------------------------------------------------------------------------
# Noise calibration


def _measured_snr(cable: CableModel, cfg: SweepConfig, laser, seed: int, expected_bins) -> float:
    from .dsp import detect_peaks, estimate_snr, matched_filter

    caps = list(simulate_captures(cable, cfg, 2, laser=laser, seed=seed))
    ir = matched_filter(caps[0], generate_sweep(cfg, 0), caps[1])
    peaks = detect_peaks(ir, expected_bins, threshold_db=-math.inf)
    return float(np.median(estimate_snr(ir, peaks).snr_db))


def expected_delays(cable: CableModel, t: float = 0.0) -> np.ndarray:
    return np.array([float(roundtrip_delay(cable, k, t)) for k in range(1, cable.n_repeaters + 1)])


def equivalent_sweeps(cfg: SweepConfig, averaging: float) -> float:
    """Same-launch sweeps coherently averaged within ``averaging`` seconds."""
    return max(1.0, averaging / (2 * cfg.sweep_period))


def calibrate_noise_floor(
    cable: CableModel,
    cfg: SweepConfig,
    target_snr_db: float,
    averaging: float = 1.0,
    *,
    laser: LaserModel | None = None,
    seed: int = 0,
    tol_db: float = 0.05,
    max_iter: int = 60,
) -> float:
    """Per-repeater ASE density giving ``target_snr_db`` after ``averaging`` seconds.

    Coherent averaging over W same-launch sweeps lowers the white floor by W,
    so each evaluation simulates one sweep at density ``d / W`` and reads the
    median per-repeater SNR. The noise realization is fixed by ``seed``,
    which makes the SNR monotone in ``d`` and the bisection deterministic.
    """
    if cable.n_repeaters == 0:
        raise CalibrationError("no repeaters to calibrate against", -math.inf)
    if not math.isfinite(target_snr_db):
        raise CalibrationError("target SNR must be finite", math.nan)
    w = equivalent_sweeps(cfg, averaging)
    bins = expected_delays(cable) * cfg.sample_rate

    def snr(d: float) -> float:
        return _measured_snr(cable.with_uniform_ase(d / w), cfg, laser, seed, bins)

    best = snr(0.0)
    if best < target_snr_db + tol_db:
        raise CalibrationError(f"target {target_snr_db:.2f} dB is not reachable", best)

    # initial guess from the echo power of the first repeater
    a2 = cable.echo_amplitude(1) ** 2
    n = cfg.samples_per_sweep
    d = a2 * n / (cfg.sample_rate * 10 ** (target_snr_db / 10))
    lo, hi = math.log10(d) - 1, math.log10(d) + 1
    while snr(10**lo) < target_snr_db:
        lo -= 1
    while snr(10**hi) > target_snr_db:
        hi += 1
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = snr(10**mid)
        if abs(s - target_snr_db) <= tol_db:
            return 10**mid
        if s > target_snr_db:
            lo = mid
        else:
            hi = mid
    return 10 ** (0.5 * (lo + hi))
