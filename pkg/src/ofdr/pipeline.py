"""Simulate, process and analyze stages, and the run manifest.

Each stage is a generator. Per-sweep work (capture synthesis, matched
filtering) goes through :func:`ordered_map`, a thread pool with a bounded
number of sweeps in flight whose results come back in sweep order; the
cross-sweep state lives in a single serial fold. Stages pull from each
other, so the in-flight bound is also the queue bound between them.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np
import scipy
import yaml

from . import __version__
from . import analysis as an
from .cablesim import expected_delays, propagate, run_laser_track
from .dsp import (
    Flag,
    Processor,
    ReferenceCache,
    RepeaterObservation,
    SweepCapture,
    capture_pairs,
    delay_series,
    differential_phase,
    matched_filter,
    pair_observations,
    phase_series,
)
from .scenario import Scenario, build_scenario
from .stream import wire_time
from .waveform import ProbeWaveform, SweepConfig, generate_sweep, pol_multiplex

T = TypeVar("T")
R = TypeVar("R")

SIDECAR_FORMAT = "ofdr-sidecar/1"
MANIFEST_FORMAT = "ofdr-manifest/1"


def default_workers(requested: int = 0) -> int:
    return requested if requested > 0 else (os.cpu_count() or 1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1, depth: int = 8) -> Iterator[R]:
    """``map(fn, items)`` on a thread pool, results in input order.

    At most ``max(depth, workers)`` items are in flight, so a slow consumer
    throttles the producer instead of accumulating results.
    """
    if workers <= 1:
        for it in items:
            yield fn(it)
        return
    depth = max(depth, workers)
    with ThreadPoolExecutor(workers) as pool:
        pending: deque = deque()
        for it in items:
            pending.append(pool.submit(fn, it))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# ---------------------------------------------------------------------------
# Stages


def simulate(scn: Scenario, workers: int | None = None) -> Iterator[SweepCapture]:
    """Captures for the scenario's run, timestamps already at wire resolution."""
    cfg, cable = scn.sweep, scn.cable
    cable.check_unambiguous(cfg)
    track = run_laser_track(cfg, scn.laser, scn.n_sweeps, scn.seed, scn.start_sweep)
    samples = generate_sweep(cfg, scn.start_sweep).samples

    def one(m: int) -> SweepCapture:
        probe = ProbeWaveform(m, pol_multiplex(cfg, m), samples, cfg)
        cap = propagate(cable, probe, cfg, laser=track, seed=scn.seed)
        cap.t0 = wire_time(cap.t0)
        return cap

    sweeps = range(scn.start_sweep, scn.start_sweep + scn.n_sweeps)
    yield from ordered_map(one, sweeps, default_workers(scn.workers if workers is None else workers),
                           scn.queue_depth)


def make_processor(cfg: SweepConfig, proc: dict, expected: Sequence[float] | None) -> Processor:
    return Processor(
        cfg,
        expected_delays=expected if proc.get("expected_delays", True) else None,
        average=int(proc["average"]),
        threshold_db=float(proc["threshold_db"]),
        acquire_sweeps=int(proc["acquire_sweeps"]),
        acquire_threshold_db=float(proc["acquire_threshold_db"]),
        alpha=float(proc["alpha"]),
        search_bins=int(proc["search_bins"]),
        mode=proc["mode"],
    )


def process(
    captures: Iterable[SweepCapture],
    cfg: SweepConfig,
    proc: dict,
    expected: Sequence[float] | None = None,
    workers: int = 1,
    depth: int = 8,
) -> Iterator[RepeaterObservation]:
    """Matched filter in parallel, then the ordered tracking fold."""
    refs = ReferenceCache(cfg)

    def mf(pair):
        cap, follow = pair
        return matched_filter(cap, refs(cap.sweep_index), follow)

    processor = make_processor(cfg, proc, expected)
    for ir in ordered_map(mf, capture_pairs(captures), workers, depth):
        yield from processor.push(ir)
    yield from processor.flush()


def _k_file(prefix: str, k: int, suffix: str = ".csv") -> str:
    return f"{prefix}_k{k:02d}{suffix}"


def analyze(
    observations: Sequence[RepeaterObservation],
    out_dir: str | Path,
    params: dict,
    sweep_period: float,
    products: Sequence[str] | None = None,
    phase_convention: str = "max_element",
) -> list[Path]:
    """Write the analysis products for an observation set into ``out_dir``.

    Products too short for their estimator are skipped and listed in the
    summary instead of failing the run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    products = list(params.get("products") if products is None else products)
    written: list[Path] = []
    skipped: dict[str, str] = {}
    fs_phase = 1.0 / (2 * sweep_period)
    ks = sorted({o.k for o in observations})
    pairs = pair_observations(observations)
    by_k = {k: [p for p in pairs if p.k == k] for k in ks}
    integrated = [phase_series(by_k[k], phase_convention) for k in ks]
    differential = differential_phase(integrated) if ks == list(range(1, len(ks) + 1)) else []

    if "phase" in products:
        (out / "phase").mkdir(exist_ok=True)
        for s in integrated:
            written.append(an.write_series_csv(out / "phase" / _k_file("integrated", s.k), s))
        for s in differential:
            written.append(an.write_series_csv(out / "phase" / _k_file("differential", s.k), s))

    if "psd" in products:
        (out / "psd").mkdir(exist_ok=True)
        meta = {}
        for s in integrated:
            try:
                rep = an.frequency_noise_psd(s, fs_phase, n_segments=int(params["psd_segments"]))
            except ValueError as exc:
                skipped[f"psd_k{s.k:02d}"] = str(exc)
                continue
            written.append(an.write_psd_csv(out / "psd" / _k_file("frequency_noise", s.k), rep))
            meta[str(s.k)] = rep.metadata()
        if meta:
            written.append(an.write_json(out / "psd" / "metadata.json", meta))

    if "spectrogram" in products:
        (out / "spectrogram").mkdir(exist_ok=True)
        band = tuple(float(b) for b in params["spectrogram_band"])
        win = int(params["spectrogram_window"])
        ov = params.get("spectrogram_overlap")
        for s in differential:
            try:
                grid = an.spectrogram(s, fs_phase, win, None if ov is None else int(ov), band, index=s.k)
            except ValueError as exc:
                skipped[f"spectrogram_k{s.k:02d}"] = str(exc)
                continue
            written.extend(an.write_spectrogram(out / "spectrogram" / _k_file("span", s.k, ""), grid))

    delays = {k: delay_series(observations, k) for k in ks}
    if "delay" in products:
        (out / "delay").mkdir(exist_ok=True)
        for k, (t, d) in delays.items():
            rel = (d - d[0]) * 1e9 if len(d) else d
            written.append(an.write_csv(out / "delay" / _k_file("delay", k),
                                        ["time_s", "delay_s", "delay_change_ns"], [t, d, rel]))

    if "movement" in products:
        try:
            rep = an.span_movement_report(
                {k: v for k, v in delays.items() if len(v[0])},
                window=params.get("movement_window"),
                threshold=float(params["movement_threshold"]),
            )
            written.append(an.write_json(out / "movement.json", rep.summary()))
            written.append(an.write_csv(
                out / "movement_spans.csv",
                ["time_s", *(f"span{k}_ns" for k in rep.ks)],
                [rep.t, *rep.span_ns],
            ))
        except ValueError as exc:
            skipped["movement"] = str(exc)

    if "summary" in products:
        written.append(an.write_json(out / "summary.json",
                                     _summary(observations, ks, fs_phase, sweep_period, skipped)))
    return written


def _summary(observations, ks, fs_phase, sweep_period, skipped) -> dict:
    per_k = {}
    for k in ks:
        obs = [o for o in observations if o.k == k]
        ok = [o for o in obs if not (o.flags & Flag.MISSING)]
        flags: dict[str, int] = {}
        for o in obs:
            for f in Flag:
                if f and f != Flag.POL_Y and o.flags & f:
                    flags[f.name] = flags.get(f.name, 0) + 1
        per_k[str(k)] = {
            "records": len(obs),
            "missing": len(obs) - len(ok),
            "snr_db_median": float(np.median([o.snr_db for o in ok])) if ok else None,
            "intensity_db_median": float(np.median([o.intensity_db for o in ok])) if ok else None,
            "flags": flags,
        }
    return {
        "repeaters": per_k,
        "fs_phase_hz": fs_phase,
        "fs_column_hz": 1.0 / sweep_period,
        "product_stream_bit_rate": product_rate_bits(len(ks), sweep_period),
        "skipped": skipped,
    }


# ---------------------------------------------------------------------------
# Sidecars and manifest


def sidecar(scn: Scenario) -> dict:
    """Everything downstream stages need to reproduce the run's processing."""
    return {
        "format": SIDECAR_FORMAT,
        "config": scn.config,
        "calibration": scn.calibration,
        "expected_delays_s": [float(x) for x in expected_delays(scn.cable)],
    }


def write_sidecar(path: str | Path, data: dict) -> Path:
    p = Path(str(path) + ".json")
    p.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return p


def read_sidecar(path: str | Path) -> dict | None:
    p = Path(str(path) + ".json")
    if not p.exists():
        return None
    data = json.loads(p.read_text())
    if data.get("format") != SIDECAR_FORMAT:
        return None
    return data


def scenario_from_sidecar(data: dict) -> Scenario:
    scn = build_scenario(data["config"], calibrate=False)
    scn.calibration = data.get("calibration") or {}
    return scn


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {
        "ofdr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }


class Manifest:
    """Run record: config snapshot, seeds, versions, simulated-time span and outputs.

    Timestamps are simulated sweep times, not wall-clock, so identical runs
    produce identical manifests.
    """

    def __init__(self, path: str | Path, command: str, scn: Scenario | None = None):
        self.path = Path(path)
        self.root = self.path.parent
        self.data: dict = {
            "format": MANIFEST_FORMAT,
            "command": command,
            "versions": versions(),
            "stages": [],
            "outputs": [],
        }
        if scn is not None:
            self.set_scenario(scn)

    def set_scenario(self, scn: Scenario) -> None:
        self.data["config"] = scn.config
        self.data["seeds"] = scn.seeds()
        self.data["calibration"] = scn.calibration

    def span(self, first_sweep: int | None, last_sweep: int | None, period: float) -> None:
        def stamp(m):
            return None if m is None else {"sweep_index": m, "time_s": wire_time(m * period)}

        self.data["start"] = stamp(first_sweep)
        self.data["stop"] = stamp(None if last_sweep is None else last_sweep + 1)

    def stage(self, name: str, **info) -> None:
        self.data["stages"].append({"name": name, **info})

    def fail(self, stage: str, exc: BaseException) -> None:
        self.data["failed"] = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}

    def add_outputs(self, paths: Iterable[str | Path]) -> None:
        for p in paths:
            p = Path(p)
            try:
                rel = p.resolve().relative_to(self.root.resolve())
            except ValueError:
                rel = Path(p.name)
            self.data["outputs"].append(
                {"path": rel.as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size}
            )

    def write(self) -> Path:
        self.data["outputs"].sort(key=lambda o: o["path"])
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")
        return self.path


class SweepSpan:
    """Track first and last sweep index flowing through an iterator."""

    def __init__(self, items: Iterable[SweepCapture]):
        self._items = items
        self.first: int | None = None
        self.last: int | None = None
        self.count = 0

    def __iter__(self):
        for it in self._items:
            if self.first is None:
                self.first = it.sweep_index
            self.last = it.sweep_index
            self.count += 1
            yield it


def product_rate_bits(n_repeaters: int, sweep_period: float) -> float:
    """Bit rate of the binary observation stream."""
    return n_repeaters * 96 * 8 / sweep_period if sweep_period > 0 else math.inf
