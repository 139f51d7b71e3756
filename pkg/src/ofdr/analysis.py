"""Products derived from observation streams.

Spectrograms of phase series, frequency-noise PSDs, band powers and the
span-movement (delay drift) report, plus their CSV/JSON writers. Every
function here is a pure function of its input series and parameters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .dsp import PhaseSeries

DB_FLOOR = 1e-30
MIN_MOVEMENT_SAMPLES = 32


def _as_segments(series, fs: float | None) -> tuple[list[np.ndarray], float]:
    """Split a series at unwrap resets; plain arrays are one segment."""
    if isinstance(series, PhaseSeries):
        rate = series.fs if fs is None else fs
        return [series.phase[s] for s in series.segments()], rate
    if fs is None:
        raise ValueError("fs is required for plain arrays")
    return [np.asarray(series, dtype=float)], fs


def _to_db(p: np.ndarray) -> np.ndarray:
    return 10 * np.log10(np.maximum(p, DB_FLOOR))


# ---------------------------------------------------------------------------
# Spectrogram


@dataclass
class SpectrogramGrid:
    index: int | None
    times: np.ndarray
    freqs: np.ndarray
    power_db: np.ndarray  # (len(freqs), len(times))
    fs: float
    window: str
    window_len: int
    overlap: int
    band: tuple[float, float]

    def metadata(self) -> dict:
        return {
            "index": self.index,
            "fs_phase_hz": self.fs,
            "window": self.window,
            "window_len": self.window_len,
            "overlap": self.overlap,
            "band_hz": list(self.band),
            "detrend": "linear",
            "units": "dB rad^2/Hz",
            "times_s": self.times.tolist(),
            "freqs_hz": self.freqs.tolist(),
        }


def spectrogram(
    series,
    fs_phase: float | None = None,
    window_len: int = 256,
    overlap: int | None = None,
    band: tuple[float, float] = (0.1, 10.0),
    index: int | None = None,
) -> SpectrogramGrid:
    """Short-time power spectrum of a phase series in dB.

    Segments are linearly detrended and Hann-windowed. The returned grid is
    restricted to ``band`` intersected with ``(0, fs_phase/2]``; DC never
    appears. A :class:`PhaseSeries` with unwrap resets is transformed per
    segment and the columns concatenated, so no window straddles a reset.
    """
    segs, fs = _as_segments(series, fs_phase)
    overlap = window_len // 2 if overlap is None else overlap
    if not 0 <= overlap < window_len:
        raise ValueError("overlap must lie in [0, window_len)")
    t0 = float(series.t[0]) if isinstance(series, PhaseSeries) and len(series.t) else 0.0
    offsets = []
    if isinstance(series, PhaseSeries):
        offsets = [float(series.t[s.start]) - t0 for s in series.segments()]
    else:
        offsets = [0.0]
    times, cols, freqs = [], [], None
    for seg, off in zip(segs, offsets):
        if len(seg) < window_len:
            continue
        f, t, sxx = signal.spectrogram(
            seg, fs=fs, window="hann", nperseg=window_len, noverlap=overlap,
            detrend="linear", scaling="density", mode="psd",
        )
        freqs = f
        times.append(t + off)
        cols.append(sxx)
    if freqs is None:
        raise ValueError(f"series shorter than one window ({window_len} samples)")
    lo, hi = band
    keep = (freqs > 0) & (freqs >= lo) & (freqs <= min(hi, fs / 2))
    power = np.concatenate(cols, axis=1)[keep]
    return SpectrogramGrid(
        index, np.concatenate(times), freqs[keep], _to_db(power), fs, "hann",
        window_len, overlap, (lo, hi),
    )


# ---------------------------------------------------------------------------
# PSD


@dataclass
class PsdReport:
    freqs: np.ndarray
    s_phi: np.ndarray  # rad^2/Hz, one-sided
    s_nu: np.ndarray  # Hz^2/Hz
    fs: float
    nperseg: int
    n_averages: int
    overlap: float
    parseval_ratio: float
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> float:
        return self.fs / self.nperseg

    def metadata(self) -> dict:
        return {
            "fs_phase_hz": self.fs,
            "nperseg": self.nperseg,
            "n_averages": self.n_averages,
            "overlap": self.overlap,
            "resolution_hz": self.resolution,
            "window": "hann",
            "detrend": "linear",
            "parseval_ratio": self.parseval_ratio,
            **self.meta,
        }


def welch_nperseg(n: int, n_segments: int = 8, overlap: float = 0.5) -> int:
    """Segment length giving ``n_segments`` overlapping segments over ``n`` samples."""
    return max(1, int(n // (1 + (n_segments - 1) * (1 - overlap))))


def _welch_segments(segs, fs, nperseg, noverlap):
    """Average one-sided Welch PSDs over several independent records."""
    total, count = None, 0
    variance, vcount = 0.0, 0
    step = nperseg - noverlap
    for seg in segs:
        if len(seg) < nperseg:
            continue
        f, p = signal.welch(
            seg, fs=fs, window="hann", nperseg=nperseg, noverlap=noverlap,
            detrend="linear", scaling="density",
        )
        m = 1 + (len(seg) - nperseg) // step
        total = p * m if total is None else total + p * m
        count += m
        for i in range(m):
            chunk = signal.detrend(seg[i * step : i * step + nperseg], type="linear")
            variance += float(np.mean(chunk**2))
            vcount += 1
    if total is None:
        return None
    return f, total / count, count, variance / max(vcount, 1)


def frequency_noise_psd(
    series,
    fs_phase: float | None = None,
    n_segments: int = 8,
    overlap: float = 0.5,
    nperseg: int | None = None,
) -> PsdReport:
    """Welch estimate of the phase PSD and the implied frequency-noise PSD.

    ``S_nu(f) = f**2 * S_phi(f)``. The stored Parseval ratio compares the
    integral of ``S_phi`` with the mean power of the detrended segments.
    """
    segs, fs = _as_segments(series, fs_phase)
    longest = max((len(s) for s in segs), default=0)
    if nperseg is None:
        nperseg = welch_nperseg(longest, n_segments, overlap)
    if nperseg < 8:
        raise ValueError("series too short for a PSD estimate")
    noverlap = int(round(nperseg * overlap))
    res = _welch_segments(segs, fs, nperseg, noverlap)
    if res is None:
        raise ValueError("no reset-free segment is long enough for the estimate")
    f, s_phi, count, variance = res
    df = f[1] - f[0]
    integral = float(np.sum(s_phi) * df)
    if variance > 0:
        ratio = integral / variance
    else:
        ratio = 1.0 if integral == 0 else math.inf
    return PsdReport(f, s_phi, f**2 * s_phi, fs, nperseg, count, overlap, ratio,
                     {"n_records": len(segs)})


def band_mean(rep: PsdReport, f_lo: float, f_hi: float, quantity: str = "s_nu") -> float:
    """Mean PSD level over ``[f_lo, f_hi)``.

    Single Welch bins scatter by several dB at 8 averages; band means are the
    stable figure for level comparisons.
    """
    sel = (rep.freqs >= f_lo) & (rep.freqs < f_hi)
    if not sel.any():
        raise ValueError(f"no PSD bins in [{f_lo}, {f_hi})")
    return float(np.mean(getattr(rep, quantity)[sel]))


def band_power(
    series,
    fs: float | None,
    f_lo: float,
    f_hi: float,
    linear: bool = False,
    nperseg: int | None = None,
) -> float:
    """Power in ``[f_lo, f_hi]`` relative to the whole band.

    Returns dB by default, or the linear fraction with ``linear=True``. An
    empty band gives 0 (linear) or ``-inf`` dB.
    """
    segs, rate = _as_segments(series, fs)
    if f_lo < 0 or f_hi > rate / 2 or f_lo > f_hi:
        raise ValueError(f"band [{f_lo}, {f_hi}] lies outside [0, {rate / 2}]")
    if f_lo == f_hi:
        return 0.0 if linear else -math.inf
    rep = frequency_noise_psd(series, rate, nperseg=nperseg)
    total = float(np.sum(rep.s_phi))
    inside = float(np.sum(rep.s_phi[(rep.freqs >= f_lo) & (rep.freqs <= f_hi)]))
    frac = inside / total if total > 0 else 0.0
    if linear:
        return frac
    return 10 * math.log10(frac) if frac > 0 else -math.inf


# ---------------------------------------------------------------------------
# Span movement


@dataclass
class MovementReport:
    ks: list[int]
    t: np.ndarray
    delays_ns: np.ndarray  # (K, n) round-trip delay relative to the first sample
    span_ns: np.ndarray  # (K, n) differential delay d_k - d_{k-1}
    correlation: np.ndarray  # (K, K) Pearson over span movements
    movement_ns: np.ndarray  # net change per span over the record
    movement_bound_ns: np.ndarray  # noise bound on movement_ns
    flagged: list[tuple[int, int, float]]
    threshold: float
    window: int

    def summary(self) -> dict:
        return {
            "repeaters": self.ks,
            "n_samples": int(len(self.t)),
            "window": self.window,
            "threshold": self.threshold,
            "movement_ns": {str(k): float(v) for k, v in zip(self.ks, self.movement_ns)},
            "movement_bound_ns": {str(k): float(v) for k, v in zip(self.ks, self.movement_bound_ns)},
            "correlation": self.correlation.tolist(),
            "flagged_pairs": [
                {"span_a": a, "span_b": b, "correlation": r} for a, b, r in self.flagged
            ],
        }


def _align(series: Mapping[int, tuple[np.ndarray, np.ndarray]]):
    ks = sorted(series)
    common = None
    for k in ks:
        t, _ = series[k]
        common = np.asarray(t) if common is None else np.intersect1d(common, t)
    rows = []
    for k in ks:
        t, d = (np.asarray(a) for a in series[k])
        _, idx, _ = np.intersect1d(t, common, return_indices=True)
        rows.append(d[idx])
    return ks, common, np.array(rows)


def span_movement_report(
    series: Mapping[int, tuple[np.ndarray, np.ndarray]],
    window: int | None = None,
    threshold: float = -0.8,
    edge_fraction: float = 0.1,
) -> MovementReport:
    """Per-span differential movement and correlation between spans.

    ``series`` maps repeater index to ``(timestamps, delay seconds)``. Series
    are aligned on common timestamps. Span ``k`` moves by ``d_k - d_{k-1}``
    (repeater 0 is the launch point). Pearson correlation is taken over the
    last ``window`` samples of those span movements; adjacent spans whose
    movements correlate below ``threshold`` are flagged as stretch and
    contraction candidates.
    """
    if not series:
        raise ValueError("no delay series")
    ks, t, d = _align(series)
    n = d.shape[1]
    if n < MIN_MOVEMENT_SAMPLES:
        raise ValueError(f"need at least {MIN_MOVEMENT_SAMPLES} common samples, got {n}")
    window = n if window is None else min(window, n)
    if window < MIN_MOVEMENT_SAMPLES:
        raise ValueError(f"window must hold at least {MIN_MOVEMENT_SAMPLES} samples")
    rel = (d - d[:, :1]) * 1e9
    row = {k: i for i, k in enumerate(ks)}
    span = np.empty_like(rel)
    for i, k in enumerate(ks):
        # without repeater k-1 the best available reference is the launch point
        span[i] = rel[i] - rel[row[k - 1]] if k - 1 in row else rel[i]
    tail = span[:, -window:]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(tail) if len(ks) > 1 else np.ones((1, 1))
    corr = np.atleast_2d(corr)
    edge = max(2, int(n * edge_fraction))
    movement = tail[:, -edge:].mean(axis=1) - span[:, :edge].mean(axis=1)
    noise = np.std(np.diff(span, axis=1), axis=1) / math.sqrt(2)
    bound = 3 * noise * math.sqrt(2 / edge)
    flagged = []
    for i in range(1, len(ks)):
        if ks[i] == ks[i - 1] + 1 and np.isfinite(corr[i - 1, i]) and corr[i - 1, i] < threshold:
            flagged.append((ks[i - 1], ks[i], float(corr[i - 1, i])))
    return MovementReport(ks, t, rel, span, corr, movement, bound, flagged, threshold, window)


# ---------------------------------------------------------------------------
# Writers


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: str | Path, header: Sequence[str], columns: Sequence[Sequence]) -> Path:
    """Write column vectors with a header row (names carry their units)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])
    return path


def write_series_csv(path, s: PhaseSeries) -> Path:
    return write_csv(path, ["time_s", "sweep_index", "phase_rad"], [s.t, s.sweep_index, s.phase])


def write_psd_csv(path, rep: PsdReport) -> Path:
    return write_csv(path, ["freq_hz", "s_phi_rad2_per_hz", "s_nu_hz2_per_hz"],
                     [rep.freqs, rep.s_phi, rep.s_nu])


def write_spectrogram(path_stem: str | Path, grid: SpectrogramGrid) -> tuple[Path, Path]:
    """Matrix CSV (rows = frequencies, columns = times) plus a JSON sidecar."""
    stem = Path(path_stem)
    csv_path = stem.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz\\time_s", *(_fmt(t) for t in grid.times)])
        for f, row in zip(grid.freqs, grid.power_db):
            w.writerow([_fmt(f), *(_fmt(v) for v in row)])
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(grid.metadata(), indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path
