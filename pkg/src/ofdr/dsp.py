"""Coherent receiver chain.

Per sweep: matched filtering of both receive channels against the launched
chirp, repeater peak search, sub-sample delay interpolation and SNR
estimation. Across sweeps: coherent averaging, delay tracking, pairing of
X/Y launches into full Jones matrices, and phase unwrapping.

Matched filtering is a pure function of one capture (plus the following
capture in stream mode) and can be mapped in parallel; :class:`Processor`
is the serial fold that owns all cross-sweep state.
"""

from __future__ import annotations

import enum
import functools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.fft

from .waveform import Pol, ProbeWaveform, SweepConfig, generate_sweep, pol_multiplex

SNR_CLAMP_DB = 99.0
MIN_NOISE_BINS = 100
SIDELOBE_MARGIN = 4.0  # 6 dB above the sinc sidelobe envelope


class Flag(enum.IntFlag):
    NONE = 0
    MISSING = 1
    LOW_CONFIDENCE = 2
    SNR_CLAMPED = 4
    EDGE = 8  # circular filter used; leading part of the window carries the other launch
    UNPAIRED = 16
    RESET = 32
    OFF_TRACK = 64
    POL_Y = 128


@dataclass(eq=False)
class SweepCapture:
    """One sweep period of digitized two-channel heterodyne samples.

    ``channels`` has shape ``(2, N)`` (X-receive, Y-receive) in units of ADC
    full scale. ``adc_bits`` is None for unquantized (oracle) captures.
    """

    sweep_index: int
    launch_pol: Pol
    t0: float
    channels: np.ndarray
    adc_bits: int | None = 14
    clip_count: int = 0

    def __post_init__(self):
        self.launch_pol = Pol(self.launch_pol)
        self.channels = np.asarray(self.channels, dtype=float)
        if self.channels.ndim != 2 or self.channels.shape[0] != 2:
            raise ValueError("channels must have shape (2, N)")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]


@dataclass(eq=False)
class ImpulseResponse:
    sweep_index: int
    launch_pol: Pol
    t0: float
    bins: np.ndarray  # (2, N) complex delay profile per receive channel
    cfg: SweepConfig
    averaged: int = 1
    stream: bool = True

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def power(self) -> np.ndarray:
        return np.sum(self.bins.real**2 + self.bins.imag**2, axis=0)

    @property
    def measurement_bandwidth(self) -> float:
        """Noise bandwidth of the coherent integration behind each bin."""
        return 1.0 / (self.averaged * self.cfg.sweep_period)


@dataclass(frozen=True)
class Peak:
    bin: int
    quality_db: float
    missing: bool = False


@dataclass(frozen=True)
class SnrReport:
    snr_db: np.ndarray
    clamped: np.ndarray
    low_confidence: bool
    n_noise_bins: int
    noise_floor: float
    bandwidth_hz: float


@dataclass
class RepeaterObservation:
    """Single-sweep Jones column for repeater ``k`` (1-based).

    ``column`` holds the complex peak values on the X and Y receive channels,
    normalized by the sweep length.
    """

    k: int
    sweep_index: int
    timestamp: float
    launch_pol: Pol
    column: np.ndarray
    delay_est: float
    intensity_db: float
    snr_db: float
    flags: Flag = Flag.NONE

    @property
    def jones(self) -> np.ndarray:
        j = np.zeros((2, 2), dtype=complex)
        j[:, 0 if self.launch_pol == Pol.X else 1] = self.column
        return j


@dataclass
class JonesObservation:
    k: int
    sweep_index: int
    timestamp: float
    jones: np.ndarray
    delay_est: float
    flags: Flag = Flag.NONE


@dataclass
class PhaseSeries:
    k: int
    t: np.ndarray
    phase: np.ndarray
    sweep_index: np.ndarray
    resets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def fs(self) -> float:
        if len(self.t) < 2:
            return float("nan")
        return 1.0 / float(np.median(np.diff(self.t)))

    def segments(self) -> list[slice]:
        edges = [0, *sorted(int(r) for r in self.resets), len(self.t)]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


# ---------------------------------------------------------------------------
# Matched filtering


def circular_xcorr(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """``c[l] = sum_n x[n] * conj(ref[(n - l) mod N])`` via the FFT."""
    return scipy.fft.ifft(scipy.fft.fft(x, axis=-1) * np.conj(scipy.fft.fft(ref)), axis=-1)


@functools.lru_cache(maxsize=8)
def _carrier_derotation(cfg: SweepConfig, n: int) -> np.ndarray:
    lags = np.arange(n)
    return np.exp(-2j * np.pi * np.mod(cfg.if_center * lags / cfg.sample_rate, 1.0))


_REF_CACHE: dict = {}


def _reference_spectrum(samples: np.ndarray, n_fft: int) -> np.ndarray:
    key = (id(samples), n_fft)
    hit = _REF_CACHE.get(key)
    if hit is not None and hit[0] is samples:
        return hit[1]
    spec = np.conj(scipy.fft.fft(samples, n_fft))
    if len(_REF_CACHE) > 8:
        _REF_CACHE.clear()
    _REF_CACHE[key] = (samples, spec)
    return spec


def _analytic_xcorr(x: np.ndarray, ref_conj_spec: np.ndarray) -> np.ndarray:
    """Circular correlation of the analytic signal of real ``x`` with a reference.

    Works on the one-sided spectrum: the analytic signal has no negative
    frequencies, so only bins ``0..n/2`` of the product survive.
    """
    n = x.shape[-1]
    half = scipy.fft.rfft(x, axis=-1)
    half[..., 1 : (n + 1) // 2] *= 2.0
    full = np.zeros(x.shape[:-1] + (n,), dtype=complex)
    full[..., : half.shape[-1]] = half * ref_conj_spec[: half.shape[-1]]
    return scipy.fft.ifft(full, axis=-1)


def matched_filter(
    capture: SweepCapture,
    reference: ProbeWaveform,
    following: SweepCapture | None = None,
) -> ImpulseResponse:
    """Pulse-compress one capture against its launched sweep.

    The real capture is turned into its analytic signal and cross-correlated
    with the reference in the transform domain. With ``following`` the
    correlation is linear over the two-sweep stream, so every echo of this
    sweep is integrated over its full length and echoes of the neighbouring
    sweeps (other launch polarization) stay out of the peaks. Without it the
    correlation is circular over the capture.

    The output at lag ``l`` is rotated by ``exp(-2j*pi*f_IF*l/fs)`` so that a
    reflector at delay tau reads phase ``-2*pi*f_IF*tau`` plus its path phase,
    continuous as tau moves across bins.
    """
    cfg = reference.cfg
    if cfg is None:
        raise ValueError("reference waveform carries no sweep configuration")
    n = len(reference.samples)
    if capture.n_samples != n:
        raise ValueError(
            f"capture length {capture.n_samples} does not match reference length {n}"
        )
    if following is None:
        bins = _analytic_xcorr(capture.channels, _reference_spectrum(reference.samples, n))
    else:
        if following.n_samples != n:
            raise ValueError("following capture length does not match reference")
        buf = np.concatenate([capture.channels, following.channels], axis=1)
        bins = _analytic_xcorr(buf, _reference_spectrum(reference.samples, 2 * n))[:, :n]
    bins *= _carrier_derotation(cfg, n)
    return ImpulseResponse(
        capture.sweep_index, capture.launch_pol, capture.t0, bins, cfg,
        stream=following is not None,
    )


# ---------------------------------------------------------------------------
# Peaks, delay and SNR


def _noise_floor(power: np.ndarray) -> float:
    return float(np.median(power))


def _quality(p: float, floor: float) -> float:
    if floor <= 0:
        return math.inf if p > 0 else -math.inf
    return 10 * math.log10(p / floor) if p > 0 else -math.inf


def detect_peaks(
    ir: ImpulseResponse,
    expected: Sequence[float] | None = None,
    threshold_db: float = 10.0,
    search_bins: int = 3,
    power: np.ndarray | None = None,
) -> list[Peak]:
    """Locate repeater peaks.

    ``expected`` holds nominal delays in (fractional) bins. With it, one
    :class:`Peak` is returned per expected delay, searched within
    ``+/- search_bins``; a peak below ``threshold_db`` over the median floor
    is returned with ``missing=True``. Without it, all local maxima above the
    threshold survive a non-maximum suppression one resolution cell wide.
    """
    power = ir.power if power is None else power
    n = len(power)
    floor = _noise_floor(power)
    if expected is not None:
        peaks = []
        for e in expected:
            centre = int(round(e))
            idx = np.arange(centre - search_bins, centre + search_bins + 1)
            idx = idx[(idx >= 0) & (idx < n)]
            b = int(idx[np.argmax(power[idx])])
            q = _quality(power[b], floor)
            peaks.append(Peak(b, q, missing=q < threshold_db))
        return peaks

    if floor <= 0:
        thresh = 0.0
        above = power > 0
    else:
        thresh = floor * 10 ** (threshold_db / 10)
        above = power >= thresh
    left = np.roll(power, 1)
    right = np.roll(power, -1)
    cand = np.flatnonzero(above & (power >= left) & (power >= right))
    cand = cand[np.argsort(power[cand])[::-1]]
    res = ir.cfg.resolution_bins
    sep = int(math.ceil(res))
    accepted: list[int] = []
    for b in cand:
        dist = [min(abs(b - a), n - abs(b - a)) for a in accepted]
        if any(d < sep for d in dist):
            continue
        # reject range sidelobes: stay above the summed 1/(pi x)^2 envelope of stronger peaks
        envelope = sum(math.sqrt(power[a]) / (math.pi * d / res) for a, d in zip(accepted, dist))
        if power[b] < SIDELOBE_MARGIN * envelope**2:
            continue
        accepted.append(int(b))
    return [Peak(b, _quality(power[b], floor)) for b in sorted(accepted)]


def subsample_offset(mag: np.ndarray, b: int) -> float:
    """Three-point parabolic vertex offset around ``mag[b]``, in (-0.5, 0.5)."""
    if b <= 0 or b >= len(mag) - 1:
        raise ValueError(f"peak bin {b} lies on the array edge")
    a, c, d = mag[b - 1], mag[b], mag[b + 1]
    denom = a - 2 * c + d
    if denom >= 0:
        return 0.0
    off = 0.5 * (a - d) / denom
    return float(np.clip(off, -0.4999999, 0.4999999))


INTERP_HALF = 12
INTERP_STEP = 0.01


@functools.lru_cache(maxsize=1)
def _interp_kernel() -> np.ndarray:
    """Kaiser-windowed sinc taps for lags on a 0.01-bin grid over [-0.6, 0.6]."""
    grid = np.arange(-60, 61) * INTERP_STEP
    x = grid[:, None] - np.arange(-INTERP_HALF, INTERP_HALF + 1)[None, :]
    w = np.i0(8.0 * np.sqrt(np.clip(1 - (x / (INTERP_HALF + 1)) ** 2, 0, None))) / np.i0(8.0)
    return np.sinc(x) * w


def refine_offset(bins: np.ndarray, b: int) -> float:
    """Sub-bin peak offset from band-limited interpolation of complex bins.

    The derotated response occupies only ``|f| < B/2`` of the sample band,
    so windowed-sinc interpolation is accurate to about 1e-4 bin, where the
    three-point parabola is biased by up to 1e-2 bin at three samples per
    resolution cell. ``bins`` is ``(channels, n)``; channel powers add. Falls
    back to the parabola within ``INTERP_HALF`` bins of an edge.
    """
    n = bins.shape[-1]
    if b - INTERP_HALF < 0 or b + INTERP_HALF >= n:
        return subsample_offset(np.sqrt(np.sum(np.abs(bins) ** 2, axis=0)), b)
    seg = bins[:, b - INTERP_HALF : b + INTERP_HALF + 1]
    p = np.sum(np.abs(_interp_kernel() @ seg.T) ** 2, axis=1)
    j = int(np.clip(np.argmax(p), 1, len(p) - 2))
    return float(np.clip((j - 60 + subsample_offset(p, j)) * INTERP_STEP, -0.6, 0.6))


def estimate_delay_subsample(ir: ImpulseResponse, b: int) -> float:
    return (b + refine_offset(ir.bins, b)) / ir.cfg.sample_rate


def coherent_average(irs: Sequence[ImpulseResponse], w: int | None = None) -> ImpulseResponse:
    """Complex mean of the last ``w`` responses (all of them by default)."""
    if not irs:
        raise ValueError("no impulse responses to average")
    w = len(irs) if w is None else w
    if w < 1 or w > len(irs):
        raise ValueError(f"cannot average {w} of {len(irs)} responses")
    chosen = list(irs)[-w:]
    pols = {ir.launch_pol for ir in chosen}
    if len(pols) > 1:
        raise ValueError("cannot coherently average mixed launch polarizations")
    last = chosen[-1]
    if w == 1:
        return last
    bins = np.mean([ir.bins for ir in chosen], axis=0)
    return ImpulseResponse(
        last.sweep_index, last.launch_pol, last.t0, bins, last.cfg,
        averaged=sum(ir.averaged for ir in chosen), stream=all(ir.stream for ir in chosen),
    )


def estimate_snr(ir: ImpulseResponse, peaks: Sequence[Peak], power: np.ndarray | None = None) -> SnrReport:
    """Peak power over the median of bins at least 5/B from every peak."""
    power = ir.power if power is None else power
    n = len(power)
    guard = int(math.ceil(5 * ir.cfg.resolution_bins))
    clean = np.ones(n, dtype=bool)
    for p in peaks:
        idx = np.arange(p.bin - guard, p.bin + guard + 1) % n
        clean[idx] = False
    n_clean = int(clean.sum())
    floor = float(np.median(power[clean])) if n_clean else 0.0
    snr = np.empty(len(peaks))
    clamped = np.zeros(len(peaks), dtype=bool)
    for i, p in enumerate(peaks):
        s = _quality(power[p.bin], floor) if floor > 0 else math.inf
        if s > SNR_CLAMP_DB:
            s, clamped[i] = SNR_CLAMP_DB, True
        snr[i] = s
    return SnrReport(snr, clamped, n_clean < MIN_NOISE_BINS, n_clean, floor, ir.measurement_bandwidth)


# ---------------------------------------------------------------------------
# Tracking and extraction


def power_average(irs: Sequence[ImpulseResponse]) -> np.ndarray:
    """Incoherent (power) mean of the responses' summed channel power."""
    if not irs:
        raise ValueError("no impulse responses to average")
    return np.mean([ir.power for ir in irs], axis=0)


@dataclass
class TrackerState:
    """Cross-sweep state: nominal delays (bins) and averaging buffers.

    ``mode`` selects coherent (complex) or power averaging over the last
    ``window`` same-launch responses.
    """

    nominal: np.ndarray
    window: int = 1
    alpha: float = 0.1
    buffers: dict = field(default_factory=lambda: {Pol.X: deque(), Pol.Y: deque()})
    mode: str = "coherent"

    def __post_init__(self):
        if self.mode not in ("coherent", "power"):
            raise ValueError(f"unknown averaging mode {self.mode!r}")

    def _buffer(self, ir: ImpulseResponse) -> deque:
        buf = self.buffers[ir.launch_pol]
        buf.append(ir)
        while len(buf) > self.window:
            buf.popleft()
        return buf

    def push(self, ir: ImpulseResponse) -> ImpulseResponse:
        return coherent_average(self._buffer(ir))

    def push_power(self, ir: ImpulseResponse) -> np.ndarray:
        return power_average(self._buffer(ir))


def extract_observation(
    ir: ImpulseResponse,
    peaks: Sequence[Peak],
    tracker: TrackerState,
    snr: SnrReport | None = None,
    extra_flags: Flag = Flag.NONE,
    power: np.ndarray | None = None,
) -> list[RepeaterObservation]:
    """One observation per peak: Jones column, delay, intensity and SNR.

    ``power`` overrides the detection power profile (power averaging); the
    Jones column is always read from ``ir`` itself.
    """
    ir_power = ir.power
    power = ir_power if power is None else power
    snr = estimate_snr(ir, peaks, power) if snr is None else snr
    n = ir.n_bins
    mag = np.sqrt(power)
    fs = ir.cfg.sample_rate
    out = []
    base = extra_flags | (Flag.POL_Y if ir.launch_pol == Pol.Y else Flag.NONE)
    if snr.low_confidence:
        base |= Flag.LOW_CONFIDENCE
    for i, p in enumerate(peaks):
        flags = base
        if snr.clamped[i]:
            flags |= Flag.SNR_CLAMPED
        nominal = tracker.nominal[i]
        try:
            # an averaged power profile has no complex bins to interpolate
            off = subsample_offset(mag, p.bin) if power is not ir_power else refine_offset(ir.bins, p.bin)
            est_bins = p.bin + off
        except ValueError:
            est_bins = float(p.bin)
            flags |= Flag.OFF_TRACK
        if p.missing:
            flags |= Flag.MISSING
        else:
            if abs(est_bins - nominal) > 1.0:
                flags |= Flag.OFF_TRACK
            tracker.nominal[i] = (1 - tracker.alpha) * nominal + tracker.alpha * est_bins
        col = ir.bins[:, p.bin] / n
        intensity = 10 * math.log10(power[p.bin] / n**2) if power[p.bin] > 0 else -math.inf
        out.append(
            RepeaterObservation(
                k=i + 1,
                sweep_index=ir.sweep_index,
                timestamp=ir.t0,
                launch_pol=ir.launch_pol,
                column=col,
                delay_est=est_bins / fs,
                intensity_db=float(np.float32(intensity)),
                snr_db=float(np.float32(snr.snr_db[i])),
                flags=flags,
            )
        )
    return out


class Processor:
    """Ordered fold over impulse responses producing per-sweep observations.

    ``expected_delays`` (seconds) puts the receiver in monitoring mode. Without
    it the first ``acquire_sweeps`` responses are power-averaged and searched
    blind to establish the repeater list.
    """

    def __init__(
        self,
        cfg: SweepConfig,
        expected_delays: Sequence[float] | None = None,
        average: int = 1,
        threshold_db: float = 6.0,
        acquire_sweeps: int = 16,
        acquire_threshold_db: float = 10.0,
        alpha: float = 0.1,
        search_bins: int = 3,
        mode: str = "coherent",
    ):
        self.cfg = cfg
        self.mode = mode
        self.average = average
        self.threshold_db = threshold_db
        self.acquire_sweeps = acquire_sweeps
        self.acquire_threshold_db = acquire_threshold_db
        self.search_bins = search_bins
        self.tracker: TrackerState | None = None
        self._alpha = alpha
        self._pending: list[ImpulseResponse] = []
        if expected_delays is not None:
            nominal = np.asarray(expected_delays, dtype=float) * cfg.sample_rate
            self.tracker = TrackerState(nominal, window=average, alpha=alpha, mode=mode)

    def _acquire(self) -> None:
        power = np.mean([ir.power for ir in self._pending], axis=0)
        peaks = detect_peaks(self._pending[0], threshold_db=self.acquire_threshold_db, power=power)
        mag = np.sqrt(power)
        nominal = []
        for p in peaks:
            try:
                nominal.append(p.bin + subsample_offset(mag, p.bin))
            except ValueError:
                nominal.append(float(p.bin))
        self.tracker = TrackerState(
            np.asarray(nominal, dtype=float), window=self.average, alpha=self._alpha, mode=self.mode
        )

    def _process(self, ir: ImpulseResponse) -> list[RepeaterObservation]:
        tracker = self.tracker
        flags = Flag.NONE if ir.stream else Flag.EDGE
        if tracker.mode == "power":
            power = tracker.push_power(ir)
            if len(tracker.nominal) == 0:
                return []
            peaks = detect_peaks(ir, tracker.nominal, self.threshold_db, self.search_bins, power=power)
            return extract_observation(ir, peaks, tracker, extra_flags=flags, power=power)
        avg = tracker.push(ir)
        if len(tracker.nominal) == 0:
            return []
        peaks = detect_peaks(avg, tracker.nominal, self.threshold_db, self.search_bins)
        return extract_observation(avg, peaks, tracker, extra_flags=flags)

    def push(self, ir: ImpulseResponse) -> list[RepeaterObservation]:
        if self.tracker is None:
            self._pending.append(ir)
            if len(self._pending) < self.acquire_sweeps:
                return []
            return self.flush()
        return self._process(ir)

    def flush(self) -> list[RepeaterObservation]:
        out: list[RepeaterObservation] = []
        if self.tracker is None and self._pending:
            self._acquire()
        pending, self._pending = self._pending, []
        for ir in pending:
            out.extend(self._process(ir))
        return out


class ReferenceCache:
    """Reference sweeps differ only in launch tag; keep one sample array."""

    def __init__(self, cfg: SweepConfig):
        self.cfg = cfg
        self._samples = generate_sweep(cfg, 0).samples

    def __call__(self, sweep_index: int) -> ProbeWaveform:
        return ProbeWaveform(sweep_index, pol_multiplex(self.cfg, sweep_index), self._samples, self.cfg)


def capture_pairs(
    captures: Iterable[SweepCapture],
) -> Iterator[tuple[SweepCapture, SweepCapture | None]]:
    """Each capture with its immediate successor, or None at a gap or the end."""
    prev: SweepCapture | None = None
    for cap in captures:
        if prev is not None:
            yield prev, (cap if cap.sweep_index == prev.sweep_index + 1 else None)
        prev = cap
    if prev is not None:
        yield prev, None


def filter_stream(captures: Iterable[SweepCapture], cfg: SweepConfig) -> Iterator[ImpulseResponse]:
    """Matched-filter a capture stream, pairing each capture with its successor.

    Captures whose successor is absent (end of stream or a sequence gap) fall
    back to the circular filter.
    """
    refs = ReferenceCache(cfg)
    for cap, follow in capture_pairs(captures):
        yield matched_filter(cap, refs(cap.sweep_index), follow)


# ---------------------------------------------------------------------------
# Jones assembly and phase


def assemble_jones(obs_x: RepeaterObservation, obs_y: RepeaterObservation) -> JonesObservation:
    if obs_x.k != obs_y.k:
        raise ValueError("observations belong to different repeaters")
    if obs_x.launch_pol != Pol.X or obs_y.launch_pol != Pol.Y:
        raise ValueError("need one X-launch and one Y-launch observation")
    j = np.column_stack([obs_x.column, obs_y.column])
    flags = (obs_x.flags | obs_y.flags) & ~Flag.POL_Y
    return JonesObservation(
        obs_x.k,
        min(obs_x.sweep_index, obs_y.sweep_index),
        0.5 * (obs_x.timestamp + obs_y.timestamp),
        j,
        0.5 * (obs_x.delay_est + obs_y.delay_est),
        Flag(flags),
    )


def pair_observations(observations: Iterable[RepeaterObservation]) -> list[JonesObservation]:
    """Pair consecutive opposite-launch sweeps of each repeater.

    An observation without a partner in the adjacent sweep is emitted as a
    column-only record flagged UNPAIRED.
    """
    by_k: dict[int, list[RepeaterObservation]] = {}
    for o in observations:
        by_k.setdefault(o.k, []).append(o)
    out: list[JonesObservation] = []
    for k in sorted(by_k):
        obs = sorted(by_k[k], key=lambda o: o.sweep_index)
        i = 0
        while i < len(obs):
            a = obs[i]
            b = obs[i + 1] if i + 1 < len(obs) else None
            if b is not None and b.sweep_index == a.sweep_index + 1 and a.launch_pol != b.launch_pol:
                x, y = (a, b) if a.launch_pol == Pol.X else (b, a)
                out.append(assemble_jones(x, y))
                i += 2
            else:
                out.append(
                    JonesObservation(a.k, a.sweep_index, a.timestamp, a.jones, a.delay_est,
                                     Flag((a.flags | Flag.UNPAIRED) & ~Flag.POL_Y))
                )
                i += 1
    return out


def normalize_jones(j: np.ndarray) -> np.ndarray:
    """Scale a Jones matrix to unit determinant, fixing the sign by Re(trace) >= 0."""
    det = np.linalg.det(j)
    if abs(det) < 1e-300:
        scale = np.linalg.norm(j) / math.sqrt(2)
        if scale == 0:
            return j.copy()
        idx = np.unravel_index(np.argmax(np.abs(j)), j.shape)
        return j / scale * np.exp(-1j * np.angle(j[idx]))
    jn = j / np.sqrt(det + 0j)
    if np.trace(jn).real < 0:
        jn = -jn
    return jn


def _unwrap_segments(wrapped: np.ndarray, resets: np.ndarray) -> np.ndarray:
    out = np.empty_like(wrapped)
    edges = [0, *resets.tolist(), len(wrapped)]
    for a, b in zip(edges[:-1], edges[1:]):
        seg = np.unwrap(wrapped[a:b])
        if a > 0:
            # best guess across the gap: the branch nearest the last value
            seg += 2 * np.pi * np.round((out[a - 1] - seg[0]) / (2 * np.pi))
        out[a:b] = seg
    return out


def phase_series(
    jones_obs: Sequence[JonesObservation],
    convention: str = "max_element",
    element: tuple[int, int] | None = None,
) -> PhaseSeries:
    """Unwrapped phase of one repeater, relative to the first accepted pair.

    ``max_element`` tracks the element with the largest magnitude in the
    first accepted pair (held fixed thereafter); ``det`` uses half the phase
    of the determinant, which is insensitive to polarization rotation.
    Missing or unpaired records and sweep gaps reset the unwrap; reset
    positions are recorded.
    """
    ok = [o for o in jones_obs if not (o.flags & (Flag.MISSING | Flag.UNPAIRED))]
    k = jones_obs[0].k if jones_obs else 0
    if not ok:
        e = np.zeros(0)
        return PhaseSeries(k, e, e, np.zeros(0, dtype=int))
    sweeps = np.array([o.sweep_index for o in ok], dtype=np.int64)
    t = np.array([o.timestamp for o in ok])
    if convention == "max_element":
        if element is None:
            element = np.unravel_index(np.argmax(np.abs(ok[0].jones)), (2, 2))
        wrapped = np.array([np.angle(o.jones[element]) for o in ok])
        scale = 1.0
    elif convention == "det":
        wrapped = np.array([np.angle(np.linalg.det(o.jones)) for o in ok])
        scale = 0.5
    else:
        raise ValueError(f"unknown phase convention {convention!r}")
    resets = np.flatnonzero(np.diff(sweeps) > 2) + 1
    phase = _unwrap_segments(wrapped, resets) * scale
    phase -= phase[0]
    return PhaseSeries(k, t, phase, sweeps, resets)


def differential_phase(series: Sequence[PhaseSeries]) -> list[PhaseSeries]:
    """Span phases: phi_k - phi_{k-1} on common sweep indices (phi_0 = 0)."""
    out = []
    for i, s in enumerate(series):
        if i == 0:
            out.append(s)
            continue
        prev = series[i - 1]
        common, ia, ib = np.intersect1d(s.sweep_index, prev.sweep_index, return_indices=True)
        d = s.phase[ia] - prev.phase[ib]
        reset_sweeps = set(s.sweep_index[s.resets].tolist()) | set(prev.sweep_index[prev.resets].tolist())
        resets = [i for i in range(1, len(common)) if common[i] in reset_sweeps or common[i] - common[i - 1] > 2]
        out.append(PhaseSeries(s.k, s.t[ia], d, common, np.asarray(resets, dtype=int)))
    return out


def delay_series(observations: Iterable[RepeaterObservation], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Timestamps and delay estimates (seconds) of repeater ``k``, skipping missing."""
    obs = [o for o in observations if o.k == k and not (o.flags & Flag.MISSING)]
    obs.sort(key=lambda o: o.sweep_index)
    return np.array([o.timestamp for o in obs]), np.array([o.delay_est for o in obs])
