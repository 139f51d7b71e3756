"""On-disk formats for captures and observations.

Capture files are plain concatenations of stream frames (see
:mod:`ofdr.stream`), so a file and a socket carry the same bytes.

Observations are written either as JSON lines or as fixed 96-byte
little-endian binary records::

    offset  type     field
    0       u16      k (repeater, 1-based)
    2       u16      flags (dsp.Flag bits; 128 = Y launch)
    4       u32      sweep_index
    8       f64      timestamp (s)
    16      f64      delay_est (s)
    24      8 x f64  jones re00 im00 re01 im01 re10 im10 re11 im11
    88      f32      intensity (dB)
    92      f32      snr (dB)

A single-sweep record carries its Jones column in the launch-polarization
column and zeros in the other. Intensity and SNR are float32 in both
formats, so the two are exactly interconvertible.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .dsp import Flag, RepeaterObservation, SweepCapture
from .stream import FrameReader, Reject, encode_frame
from .waveform import Pol

RECORD = struct.Struct("<HHIdd8dff")
RECORD_SIZE = RECORD.size  # 96
assert RECORD_SIZE == 96


def _jones_reals(o: RepeaterObservation) -> list[float]:
    j = o.jones
    return [float(v) for z in j.reshape(-1) for v in (z.real, z.imag)]


def observation_to_dict(o: RepeaterObservation) -> dict:
    return {
        "k": o.k,
        "sweep_index": o.sweep_index,
        "timestamp": o.timestamp,
        "launch_pol": o.launch_pol.value,
        "jones": _jones_reals(o),
        "delay_est": o.delay_est,
        "intensity_db": o.intensity_db,
        "snr_db": o.snr_db,
        "flags": int(o.flags),
    }


def _from_parts(k, flags, sweep, ts, delay, reals, intensity, snr, pol=None) -> RepeaterObservation:
    flags = Flag(int(flags))
    if pol is None:
        pol = Pol.Y if flags & Flag.POL_Y else Pol.X
    pol = Pol(pol)
    r = np.asarray(reals, dtype=float)
    j = (r[0::2] + 1j * r[1::2]).reshape(2, 2)
    col = j[:, 0 if pol == Pol.X else 1].copy()
    return RepeaterObservation(int(k), int(sweep), float(ts), pol, col, float(delay),
                               float(intensity), float(snr), flags)


def observation_from_dict(d: dict) -> RepeaterObservation:
    return _from_parts(d["k"], d["flags"], d["sweep_index"], d["timestamp"], d["delay_est"],
                       d["jones"], d["intensity_db"], d["snr_db"], d.get("launch_pol"))


def pack_observation(o: RepeaterObservation) -> bytes:
    if not 0 <= o.sweep_index < 2**32:
        raise ValueError("sweep_index does not fit the binary record (u32)")
    return RECORD.pack(o.k, int(o.flags), o.sweep_index, o.timestamp, o.delay_est,
                       *_jones_reals(o), o.intensity_db, o.snr_db)


def unpack_observation(buf, offset: int = 0) -> RepeaterObservation:
    v = RECORD.unpack_from(buf, offset)
    return _from_parts(v[0], v[1], v[2], v[3], v[4], v[5:13], v[13], v[14])


class ObservationWriter:
    """Streaming writer; the format follows the suffix (``.bin`` or JSON lines)."""

    def __init__(self, path: str | Path | IO, fmt: str | None = None):
        if isinstance(path, (str, Path)):
            path = Path(path)
            fmt = fmt or ("bin" if path.suffix == ".bin" else "jsonl")
            self._fh = path.open("wb")
            self._own = True
        else:
            self._fh = path
            self._own = False
            fmt = fmt or "jsonl"
        if fmt not in ("jsonl", "bin"):
            raise ValueError(f"unknown observation format {fmt!r}")
        self.fmt = fmt
        self.count = 0

    def write(self, observations: Iterable[RepeaterObservation]) -> None:
        for o in observations:
            if self.fmt == "bin":
                self._fh.write(pack_observation(o))
            else:
                line = json.dumps(observation_to_dict(o), separators=(",", ":"))
                self._fh.write(line.encode() + b"\n")
            self.count += 1

    def close(self) -> None:
        if self._own:
            self._fh.close()
        else:
            self._fh.flush()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_observations(path, observations, fmt: str | None = None) -> int:
    with ObservationWriter(path, fmt) as w:
        w.write(observations)
        return w.count


def read_observations(path: str | Path, fmt: str | None = None) -> list[RepeaterObservation]:
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "jsonl")
    data = path.read_bytes()
    if fmt == "bin":
        if len(data) % RECORD_SIZE:
            raise ValueError(f"{path}: size is not a multiple of {RECORD_SIZE}")
        return [unpack_observation(data, i) for i in range(0, len(data), RECORD_SIZE)]
    out = []
    for n, line in enumerate(data.splitlines(), start=1):
        if line.strip():
            try:
                out.append(observation_from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: bad observation record ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# Capture files


def write_captures(fh: IO[bytes], captures: Iterable[SweepCapture], start_sequence: int = 0) -> int:
    n = 0
    for n, cap in enumerate(captures, start=1):
        fh.write(encode_frame(cap, start_sequence + n - 1))
    return n


def iter_frame_file(fh: IO[bytes], chunk: int = 1 << 20, rejects: list | None = None):
    """Decoded frames from a capture file or pipe, in file order."""
    reader = FrameReader()
    while True:
        data = fh.read(chunk)
        if not data:
            break
        reader.feed(data)
        for ev in reader.events():
            if isinstance(ev, Reject):
                if rejects is not None:
                    rejects.append(ev)
                continue
            yield ev
    if reader.pending() and rejects is not None:
        rejects.append(Reject(f"{reader.pending()} trailing bytes", None))


def read_captures(source: str | Path | IO[bytes], rejects: list | None = None) -> Iterator[SweepCapture]:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            for fr in iter_frame_file(fh, rejects=rejects):
                yield fr.to_capture()
    else:
        for fr in iter_frame_file(source, rejects=rejects):
            yield fr.to_capture()


def captures_to_bytes(captures: Iterable[SweepCapture]) -> bytes:
    buf = io.BytesIO()
    write_captures(buf, captures)
    return buf.getvalue()
