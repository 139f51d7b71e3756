"""Sequenced framing of raw sweep captures over a TCP byte stream.

Wire format (all little-endian)::

    offset  size  field
    0       4     magic "OFDR"
    4       1     version (1)
    5       1     flags, bit0 = launch polarization Y
    6       8     sequence (u64, strictly increasing per connection)
    14      8     timestamp_ns (u64, sweep start)
    22      8     sweep_index (u64)
    30      4     sample_count (u32)
    34      4*n   payload: int16 pairs (Xrx, Yrx) per sample instant
    34+4n   4     crc32 (zlib polynomial 0xEDB88320) over header + payload

Samples travel as 16-bit words with the ADC code left-justified, so a
capture value ``v`` (in units of ADC full scale) is sent as ``v * 32768``.

One producer and one consumer per connection, each single-threaded. The
producer blocks in ``sendall`` once the socket buffers are full, which is
the backpressure path; the consumer only reads ahead a bounded number of
frames.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .dsp import SweepCapture
from .errors import FrameError
from .waveform import Pol

MAGIC = b"OFDR"
VERSION = 1
HEADER = struct.Struct("<4sBBQQQI")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size  # 34
FLAG_POL_Y = 0x01
SAMPLE_SCALE = 32768
MAX_SAMPLES = 1 << 26
PORT_ENV = "OFDR_STREAM_PORT"


def _zlib_crc32(data, value: int = 0) -> int:
    return zlib.crc32(data, value)


def _load_crc32():
    """CRC-32 (polynomial 0xEDB88320) from libdeflate when available.

    libdeflate's carry-less-multiply kernel runs about twenty times faster
    than the zlib build shipped with most Pythons, which matters at desk
    rates (200 kB per frame, checked once on each side). Set
    ``OFDR_CRC=zlib`` to force the standard-library path.
    """
    if os.environ.get("OFDR_CRC", "").lower() == "zlib":
        return _zlib_crc32, "zlib"
    name = ctypes.util.find_library("deflate")
    if not name:
        return _zlib_crc32, "zlib"
    try:
        fn = ctypes.CDLL(name).libdeflate_crc32
    except (OSError, AttributeError):
        return _zlib_crc32, "zlib"
    fn.restype = ctypes.c_uint32
    fn.argtypes = [ctypes.c_uint32, ctypes.c_void_p, ctypes.c_size_t]

    def crc32(data, value: int = 0) -> int:
        arr = np.frombuffer(data, dtype=np.uint8)
        return fn(value, arr.ctypes.data, arr.size) if arr.size else value

    return crc32, "libdeflate"


crc32, CRC_BACKEND = _load_crc32()


class NeedMoreBytes(FrameError):
    """Input ends before the frame does; ``needed`` is the full frame length if known."""

    def __init__(self, needed: int | None):
        super().__init__(f"truncated frame (need {needed} bytes)" if needed else "truncated header")
        self.needed = needed


def seconds_to_ns(t: float) -> int:
    return int(round(t * 1e9))


def wire_time(t: float) -> float:
    """The sweep start time as it reads after a trip through a frame."""
    return seconds_to_ns(t) / 1e9


@dataclass(frozen=True, eq=False)
class Frame:
    sequence: int
    timestamp_ns: int
    sweep_index: int
    flags: int
    payload: np.ndarray  # (sample_count, 2) int16
    version: int = VERSION
    crc: int = 0

    @property
    def sample_count(self) -> int:
        return self.payload.shape[0]

    @property
    def launch_pol(self) -> Pol:
        return Pol.Y if self.flags & FLAG_POL_Y else Pol.X

    def to_capture(self, adc_bits: int | None = 14) -> SweepCapture:
        channels = self.payload.T * (1.0 / SAMPLE_SCALE)  # exact: the scale is a power of two
        return SweepCapture(self.sweep_index, self.launch_pol, self.timestamp_ns / 1e9, channels, adc_bits)


def capture_codes(capture: SweepCapture, out: np.ndarray | None = None) -> np.ndarray:
    """Interleaved int16 words for a capture.

    Captures tagged with ``adc_bits`` hold exact ADC codes, so scaling is
    exact and takes the fast path. Others are rounded and saturated.
    ``out`` may be a preallocated ``(n, 2)`` int16 array.
    """
    ch = capture.channels
    if out is None:
        out = np.empty((capture.n_samples, 2), dtype="<i2")
    exact = capture.adc_bits is not None and capture.adc_bits <= 16
    if exact and ch.size and (ch.max() >= 1.0 or ch.min() < -1.0):
        exact = False
    for c in range(2):
        if exact:
            out[:, c] = ch[c] * SAMPLE_SCALE
        else:
            out[:, c] = np.clip(np.rint(ch[c] * SAMPLE_SCALE), -SAMPLE_SCALE, SAMPLE_SCALE - 1)
    return out


def encode_frame(capture: SweepCapture, sequence: int) -> bytearray:
    n = capture.n_samples
    if n >= 2**32:
        raise FrameError("sample_count does not fit in u32")
    if sequence < 0 or capture.sweep_index < 0:
        raise FrameError("sequence and sweep_index must be non-negative")
    flags = FLAG_POL_Y if capture.launch_pol == Pol.Y else 0
    total = frame_length(n)
    # codes are written in place: at desk rates every 200 kB copy counts
    raw = bytearray(total)
    HEADER.pack_into(raw, 0, MAGIC, VERSION, flags, sequence, seconds_to_ns(capture.t0),
                     capture.sweep_index, n)
    with memoryview(raw) as mv:
        body = mv[: total - CRC.size]
        capture_codes(capture, np.frombuffer(body[HEADER_SIZE:], dtype="<i2").reshape(n, 2))
        CRC.pack_into(raw, total - CRC.size, crc32(body))
        body.release()
    return raw


def frame_length(sample_count: int) -> int:
    return HEADER_SIZE + 4 * sample_count + CRC.size


def peek_header(buf) -> tuple:
    """Unpack the header fields of ``buf`` without any checks."""
    if len(buf) < HEADER_SIZE:
        raise NeedMoreBytes(None)
    return HEADER.unpack_from(buf, 0)


def decode_frame(buf) -> Frame:
    """Decode one frame from the start of ``buf``.

    Raises :class:`NeedMoreBytes` on truncated input and :class:`FrameError`
    on bad magic, unknown version or CRC mismatch.
    """
    magic, version, flags, seq, ts, sweep, count = peek_header(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if count > MAX_SAMPLES:
        raise FrameError(f"implausible sample_count {count}")
    total = frame_length(count)
    if len(buf) < total:
        raise NeedMoreBytes(total)
    (crc,) = CRC.unpack_from(buf, total - CRC.size)
    # release the view before raising: a live export would pin a bytearray
    with memoryview(buf) as mv:
        ok = crc32(mv[: total - CRC.size]) == crc
        payload = np.frombuffer(mv[HEADER_SIZE : total - CRC.size], dtype="<i2").reshape(count, 2).copy() if ok else None
    if not ok:
        raise FrameError(f"CRC mismatch in frame with sequence {seq}")
    return Frame(seq, ts, sweep, flags, payload, version, crc)


# ---------------------------------------------------------------------------
# Incremental decoding and gap accounting


@dataclass
class Reject:
    reason: str
    claimed_sequence: int | None


class FrameReader:
    """Incremental decoder over a byte stream.

    ``feed`` bytes, then iterate :meth:`events`, which yields decoded
    :class:`Frame` objects and :class:`Reject` records. After a reject the
    reader skips the damaged frame when its header is intact and otherwise
    resynchronizes on the next magic.
    """

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data) -> None:
        self.buf += data

    def pending(self) -> int:
        return len(self.buf)

    def events(self) -> Iterator[Frame | Reject]:
        buf = self.buf
        while True:
            if len(buf) < HEADER_SIZE:
                return
            if buf[:4] != MAGIC:
                nxt = buf.find(MAGIC, 1)
                claimed = None
                drop = len(buf) - 3 if nxt < 0 else nxt
                del buf[:drop]
                yield Reject("bad magic, resynchronized", claimed)
                continue
            try:
                frame = decode_frame(buf)
            except NeedMoreBytes:
                return
            except FrameError as exc:
                _, _, _, seq, _, _, count = peek_header(buf)
                total = frame_length(count)
                if count > MAX_SAMPLES or "version" in str(exc):
                    nxt = buf.find(MAGIC, 1)
                    del buf[: len(buf) - 3 if nxt < 0 else nxt]
                    yield Reject(str(exc), None)
                else:
                    del buf[:total]
                    yield Reject(str(exc), seq)
                continue
            del buf[: frame_length(frame.sample_count)]
            yield frame


@dataclass
class GapReport:
    """What the consumer saw on one connection.

    ``received + len(gaps) + len(rejects) + out_of_order`` equals the number
    of frames the producer sent up to the last one that arrived.
    """

    received: int = 0
    gaps: list[int] = field(default_factory=list)
    rejects: list[Reject] = field(default_factory=list)
    out_of_order: int = 0
    connection_lost: bool = False
    trailing_bytes: int = 0
    first_sequence: int | None = None
    last_sequence: int | None = None

    @property
    def accounted(self) -> int:
        return self.received + len(self.gaps) + len(self.rejects) + self.out_of_order

    def as_dict(self) -> dict:
        return {
            "received": self.received,
            "gaps": list(self.gaps),
            "rejects": [{"reason": r.reason, "claimed_sequence": r.claimed_sequence} for r in self.rejects],
            "out_of_order": self.out_of_order,
            "connection_lost": self.connection_lost,
            "trailing_bytes": self.trailing_bytes,
            "first_sequence": self.first_sequence,
            "last_sequence": self.last_sequence,
        }


class SequenceTracker:
    """Turn the sequence numbers of accepted frames into a gap report."""

    def __init__(self, first_expected: int | None = 0):
        self.report = GapReport()
        self._next = first_expected
        self._claimed: set[int] = set()
        self._spare = 0  # rejects whose sequence could not be read

    def reject(self, r: Reject) -> None:
        self.report.rejects.append(r)
        if r.claimed_sequence is None:
            self._spare += 1
        else:
            self._claimed.add(r.claimed_sequence)

    def accept(self, seq: int) -> bool:
        rep = self.report
        if self._next is None:
            self._next = seq
        if seq < self._next:
            rep.out_of_order += 1
            return False
        missing = [s for s in range(self._next, seq) if s not in self._claimed]
        # each unreadable reject stands in for one missing frame
        take = min(self._spare, len(missing))
        self._spare -= take
        rep.gaps.extend(missing[take:])
        self._claimed.difference_update(range(self._next, seq))
        rep.received += 1
        if rep.first_sequence is None:
            rep.first_sequence = seq
        rep.last_sequence = seq
        self._next = seq + 1
        return True


# ---------------------------------------------------------------------------
# Endpoints


def parse_endpoint(endpoint: str | tuple) -> tuple[str, int]:
    """``host:port`` to a socket address; ``OFDR_STREAM_PORT`` overrides the port."""
    if isinstance(endpoint, tuple):
        host, port = endpoint
    else:
        host, sep, port = str(endpoint).rpartition(":")
        if not sep:
            host, port = str(endpoint), "0"
        host = host or "127.0.0.1"
    env = os.environ.get(PORT_ENV)
    if env:
        port = env
    try:
        port = int(port)
    except ValueError as exc:
        raise ValueError(f"bad port in endpoint {endpoint!r}") from exc
    return host.strip("[]"), port


@dataclass
class ServeStats:
    frames_sent: int = 0
    frames_dropped: int = 0
    bytes_sent: int = 0
    elapsed: float = 0.0
    blocked: float = 0.0  # seconds spent inside sendall


class Producer:
    """Listening side of one connection.

    Binding happens at construction so callers can read :attr:`address`
    (useful with port 0) before :meth:`serve` blocks waiting for a peer.
    """

    def __init__(self, endpoint: str | tuple = "127.0.0.1:0", backlog: int = 1):
        host, port = parse_endpoint(endpoint)
        self.sock = socket.create_server((host, port), backlog=backlog)
        self.address = self.sock.getsockname()[:2]

    def serve(
        self,
        captures: Iterable[SweepCapture],
        *,
        start_sequence: int = 0,
        accept_timeout: float | None = 30.0,
        pace: float | None = None,
    ) -> ServeStats:
        """Send every capture as one frame to the first peer that connects.

        ``pace`` (seconds per frame) throttles to a fixed frame rate, e.g.
        the sweep period for real-time replay.
        """
        self.sock.settimeout(accept_timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        stats = ServeStats()
        t_start = time.perf_counter()
        try:
            with conn:
                seq = start_sequence
                for i, cap in enumerate(captures):
                    data = encode_frame(cap, seq)
                    if pace:
                        delay = t_start + i * pace - time.perf_counter()
                        if delay > 0:
                            time.sleep(delay)
                    t = time.perf_counter()
                    conn.sendall(data)
                    stats.blocked += time.perf_counter() - t
                    stats.frames_sent += 1
                    stats.bytes_sent += len(data)
                    seq += 1
                conn.shutdown(socket.SHUT_WR)
        finally:
            stats.elapsed = time.perf_counter() - t_start
            self.close()
        return stats

    def close(self) -> None:
        self.sock.close()


def serve(captures: Iterable[SweepCapture], endpoint: str | tuple, **kw) -> ServeStats:
    return Producer(endpoint).serve(captures, **kw)


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except (ConnectionRefusedError, OSError):
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)


class Consumer:
    """Connecting side: an iterator of captures in sequence order.

    ``buffer_frames`` bounds the read-ahead: the reader never holds more
    than that many frames' worth of undecoded bytes, so a slow caller
    stalls the socket (and through it the producer) instead of growing
    memory. :attr:`report` is complete once iteration ends.
    """

    def __init__(self, endpoint: str | tuple, *, buffer_frames: int = 4,
                 connect_timeout: float = 30.0, read_timeout: float | None = 60.0,
                 adc_bits: int | None = 14, frames: bool = False):
        self.host, self.port = parse_endpoint(endpoint)
        self.buffer_frames = max(1, int(buffer_frames))
        self.connect_timeout = connect_timeout
        self.read_timeout = read_timeout
        self.adc_bits = adc_bits
        self.frames = frames
        self.tracker = SequenceTracker(first_expected=None)
        self.max_buffered = 0

    @property
    def report(self) -> GapReport:
        return self.tracker.report

    def _limit(self, reader: FrameReader) -> int:
        if len(reader.buf) >= HEADER_SIZE and reader.buf[:4] == MAGIC:
            count = peek_header(reader.buf)[-1]
            if count <= MAX_SAMPLES:
                return self.buffer_frames * frame_length(count)
        return max(self.buffer_frames * 4096, 1 << 16)

    def __iter__(self) -> Iterator[SweepCapture | Frame]:
        sock = _connect(self.host, self.port, self.connect_timeout)
        sock.settimeout(self.read_timeout)
        reader = FrameReader()
        chunk = bytearray(1 << 20)
        view = memoryview(chunk)
        try:
            while True:
                room = self._limit(reader) - reader.pending()
                if room <= 0:
                    room = 1  # a single oversized frame still has to complete
                try:
                    n = sock.recv_into(view[: min(room, len(chunk))])
                except (ConnectionResetError, socket.timeout, OSError):
                    self.report.connection_lost = True
                    n = 0
                if n == 0:
                    break
                reader.feed(view[:n])
                self.max_buffered = max(self.max_buffered, reader.pending())
                for ev in reader.events():
                    if isinstance(ev, Reject):
                        self.tracker.reject(ev)
                    elif self.tracker.accept(ev.sequence):
                        yield ev if self.frames else ev.to_capture(self.adc_bits)
        finally:
            sock.close()
        if reader.pending():
            self.report.trailing_bytes = reader.pending()
            self.report.connection_lost = True


def consume(endpoint: str | tuple, **kw) -> Consumer:
    return Consumer(endpoint, **kw)


class FaultProxy:
    """Frame-aware relay between a producer and a consumer for fault injection.

    Frames whose sequence is in ``drop`` are discarded; in ``corrupt`` one
    payload bit is flipped so the consumer sees a CRC failure. Runs in a
    background thread; it is a test harness, not part of the data path.
    """

    def __init__(self, upstream: str | tuple, listen: str | tuple = "127.0.0.1:0",
                 drop: Iterable[int] = (), corrupt: Iterable[int] = ()):
        self.upstream = upstream if isinstance(upstream, tuple) else parse_endpoint(upstream)
        host, port = listen if isinstance(listen, tuple) else parse_endpoint(listen)
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()[:2]
        self.drop = set(drop)
        self.corrupt = set(corrupt)
        self.forwarded = 0
        self.dropped: list[int] = []
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> "FaultProxy":
        self._thread.start()
        return self

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    def _run(self) -> None:
        try:
            self.sock.settimeout(30.0)
            down, _ = self.sock.accept()
            up = _connect(*self.upstream, timeout=30.0)
            reader = FrameReader()
            with down, up:
                while True:
                    data = up.recv(1 << 20)
                    if not data:
                        break
                    reader.feed(data)
                    for ev in reader.events():
                        if isinstance(ev, Reject):
                            continue
                        raw = bytearray(self._reencode(ev))
                        if ev.sequence in self.drop:
                            self.dropped.append(ev.sequence)
                            continue
                        if ev.sequence in self.corrupt and ev.sample_count:
                            raw[HEADER_SIZE] ^= 0x01
                        down.sendall(raw)
                        self.forwarded += 1
                down.shutdown(socket.SHUT_WR)
        except BaseException as exc:  # surfaced through .error
            self.error = exc
        finally:
            self.sock.close()

    @staticmethod
    def _reencode(frame: Frame) -> bytes:
        header = HEADER.pack(MAGIC, frame.version, frame.flags, frame.sequence,
                             frame.timestamp_ns, frame.sweep_index, frame.sample_count)
        payload = frame.payload.astype("<i2").tobytes()
        return header + payload + CRC.pack(crc32(payload, crc32(header)))


def real_time_factor(frames: int, elapsed: float, sweep_period: float) -> float:
    """Signal time carried per wall-clock second."""
    return frames * sweep_period / elapsed if elapsed > 0 else math.inf
