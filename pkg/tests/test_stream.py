import struct
import threading
import time
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofdr import stream
from ofdr.dsp import SweepCapture
from ofdr.errors import FrameError
from ofdr.stream import (
    HEADER_SIZE,
    Consumer,
    FaultProxy,
    FrameReader,
    NeedMoreBytes,
    Producer,
    Reject,
    SequenceTracker,
    decode_frame,
    encode_frame,
    frame_length,
    parse_endpoint,
)
from ofdr.waveform import Pol

from .oracles import bitwise_crc32, golden_frame

GOLDEN = bytes.fromhex((Path(__file__).parent / "fixtures" / "golden_frame.hex").read_text().strip())


def random_capture(rng, n, sweep=0, pol=Pol.X, adc_bits=14):
    step = 2 ** (16 - adc_bits)
    codes = rng.integers(-32768 // step, 32768 // step, size=(2, n)) * step
    return SweepCapture(sweep, pol, sweep * 1e-3, codes / 32768.0, adc_bits)


def same_capture(a, b):
    return (a.sweep_index == b.sweep_index and a.launch_pol == b.launch_pol
            and stream.wire_time(a.t0) == b.t0 and np.array_equal(a.channels, b.channels))


def run_loopback(captures, consumer_kw=None, via_proxy=None, **serve_kw):
    """Serve ``captures`` on an ephemeral port and consume them in this thread."""
    prod = Producer("127.0.0.1:0")
    stats = {}
    t = threading.Thread(target=lambda: stats.update(s=prod.serve(captures, **serve_kw)))
    t.start()
    target = prod.address
    proxy = None
    if via_proxy is not None:
        proxy = FaultProxy(prod.address, **via_proxy).start()
        target = proxy.address
    cons = Consumer(target, **(consumer_kw or {}))
    out = list(cons)
    t.join(30)
    if proxy:
        proxy.join(30)
        assert proxy.error is None
    return out, cons, stats["s"]


# -- codec ------------------------------------------------------------------


def test_golden_frame_fixture():
    cap = SweepCapture(3, Pol.Y, 1.5e-3, np.array([[0.5, -1.0], [-0.25, 12 / 32768]]), 14)
    assert encode_frame(cap, 7) == GOLDEN
    assert golden_frame(7, 1_500_000, 3, True, [(16384, -8192), (-32768, 12)]) == GOLDEN
    fr = decode_frame(GOLDEN)
    assert (fr.sequence, fr.timestamp_ns, fr.sweep_index, fr.launch_pol) == (7, 1_500_000, 3, Pol.Y)
    assert fr.payload.tolist() == [[16384, -8192], [-32768, 12]]


def test_header_layout():
    assert HEADER_SIZE == 34
    assert frame_length(2) == len(GOLDEN) == 34 + 8 + 4


@settings(max_examples=50)
@given(n=st.integers(0, 300), seq=st.integers(0, 2**64 - 1), sweep=st.integers(0, 2**40),
       pol=st.sampled_from(list(Pol)), seed=st.integers(0, 2**32 - 1))
def test_roundtrip_property(n, seq, sweep, pol, seed):
    cap = random_capture(np.random.default_rng(seed), n, sweep, pol)
    fr = decode_frame(encode_frame(cap, seq))
    assert fr.sequence == seq
    assert same_capture(cap, fr.to_capture())


def test_payload_bit_flip_fails_crc(rng):
    raw = bytearray(encode_frame(random_capture(rng, 64), 1))
    raw[HEADER_SIZE + 17] ^= 0x08
    with pytest.raises(FrameError, match="CRC"):
        decode_frame(bytes(raw))


def test_bad_magic_and_version():
    with pytest.raises(FrameError, match="magic"):
        decode_frame(b"XFDR" + GOLDEN[4:])
    with pytest.raises(FrameError, match="version"):
        decode_frame(GOLDEN[:4] + b"\x02" + GOLDEN[5:])


@pytest.mark.parametrize("cut", [0, 10, HEADER_SIZE, len(GOLDEN) - 1])
def test_truncated_needs_more_bytes(cut):
    with pytest.raises(NeedMoreBytes):
        decode_frame(GOLDEN[:cut])


def test_unquantized_capture_saturates():
    cap = SweepCapture(0, Pol.X, 0.0, np.array([[1.5, -2.0, 0.1]] * 2), None)
    codes = decode_frame(encode_frame(cap, 0)).payload[:, 0]
    assert codes.tolist() == [32767, -32768, 3277]


def test_crc_backends_agree(rng):
    data = rng.integers(0, 256, 5000, dtype=np.uint8).tobytes()
    assert stream.crc32(data) == zlib.crc32(data) == bitwise_crc32(data)
    assert stream.crc32(data[100:], stream.crc32(data[:100])) == zlib.crc32(data)
    assert stream.crc32(b"") == 0


# -- incremental reader ------------------------------------------------------


def test_reader_byte_by_byte(rng):
    frames = [encode_frame(random_capture(rng, 10, i), i) for i in range(5)]
    r = FrameReader()
    got = []
    for byte in b"".join(frames):
        r.feed(bytes([byte]))
        got.extend(r.events())
    assert [f.sequence for f in got] == list(range(5))
    assert r.pending() == 0


def test_reader_resyncs_after_garbage(rng):
    good = [encode_frame(random_capture(rng, 10, i), i) for i in range(3)]
    r = FrameReader()
    r.feed(good[0] + b"garbage!" + good[1] + good[2])
    ev = list(r.events())
    assert [type(e) for e in ev] == [stream.Frame, Reject, stream.Frame, stream.Frame]


def test_reader_skips_crc_failure_keeping_sequence(rng):
    bad = bytearray(encode_frame(random_capture(rng, 10, 1), 1))
    bad[-1] ^= 0xFF
    r = FrameReader()
    r.feed(encode_frame(random_capture(rng, 10), 0) + bytes(bad) + encode_frame(random_capture(rng, 10, 2), 2))
    ev = list(r.events())
    assert isinstance(ev[1], Reject) and ev[1].claimed_sequence == 1
    assert [e.sequence for e in ev if not isinstance(e, Reject)] == [0, 2]


def test_sequence_tracker_conservation():
    tr = SequenceTracker()
    for s in [0, 1, 3]:
        tr.accept(s)
    tr.reject(Reject("crc", 4))
    tr.accept(5)
    tr.reject(Reject("bad magic", None))
    tr.accept(8)
    tr.accept(2)
    rep = tr.report
    assert rep.gaps == [2, 7]
    assert rep.out_of_order == 1
    assert rep.accounted == 9 + 1  # frames 0..8 plus the late duplicate of 2


# -- endpoints ---------------------------------------------------------------


def test_parse_endpoint(monkeypatch):
    monkeypatch.delenv(stream.PORT_ENV, raising=False)
    assert parse_endpoint("10.0.0.2:5000") == ("10.0.0.2", 5000)
    assert parse_endpoint(":6000") == ("127.0.0.1", 6000)
    assert parse_endpoint("[::1]:7") == ("::1", 7)
    monkeypatch.setenv(stream.PORT_ENV, "4321")
    assert parse_endpoint("localhost:1") == ("localhost", 4321)
    with pytest.raises(ValueError):
        monkeypatch.delenv(stream.PORT_ENV)
        parse_endpoint("host:notaport")


# -- transport ---------------------------------------------------------------


def test_lossless_1000_frames(rng):
    caps = [random_capture(rng, 32, i, Pol.X if i % 2 == 0 else Pol.Y) for i in range(1000)]
    out, cons, stats = run_loopback(caps)
    assert len(out) == 1000 and cons.report.gaps == []
    assert all(same_capture(a, b) for a, b in zip(caps, out))
    assert stats.frames_sent == 1000


def test_dropped_frame_500_reported(rng):
    caps = [random_capture(rng, 32, i) for i in range(1000)]
    out, cons, _ = run_loopback(caps, via_proxy={"drop": [500]})
    assert len(out) == 999
    assert cons.report.gaps == [500]
    assert cons.report.accounted == 1000
    assert [c.sweep_index for c in out] == [i for i in range(1000) if i != 500]


def test_corrupt_frame_is_rejected_not_skipped(rng):
    caps = [random_capture(rng, 32, i) for i in range(50)]
    out, cons, _ = run_loopback(caps, via_proxy={"corrupt": [10], "drop": [20, 21]})
    rep = cons.report
    assert len(out) == 47 and rep.gaps == [20, 21]
    assert [r.claimed_sequence for r in rep.rejects] == [10]
    assert rep.accounted == 50


def test_consumer_buffer_is_bounded_and_producer_blocks(rng):
    n = 50000
    one = random_capture(rng, n)
    # far more bytes than the loopback socket buffers hold
    caps = (SweepCapture(i, Pol.X, i * 1e-3, one.channels, 14) for i in range(200))
    prod = Producer("127.0.0.1:0")
    stats = {}
    t = threading.Thread(target=lambda: stats.update(s=prod.serve(caps)))
    t.start()
    cons = Consumer(prod.address, buffer_frames=2)
    count = 0
    for _ in cons:
        time.sleep(0.005)  # slow consumer
        count += 1
    t.join(30)
    assert count == 200
    assert cons.max_buffered <= 2 * frame_length(n)
    assert stats["s"].blocked > 0.1


def test_connection_loss_marks_partial_report(rng):
    prod = Producer("127.0.0.1:0")
    frames = [encode_frame(random_capture(rng, 16, i), i) for i in range(3)]

    def serve_then_cut():
        prod.sock.settimeout(10)
        conn, _ = prod.sock.accept()
        conn.sendall(frames[0] + frames[1] + frames[2][:20])
        conn.close()
        prod.close()

    t = threading.Thread(target=serve_then_cut)
    t.start()
    cons = Consumer(prod.address)
    out = list(cons)
    t.join(10)
    assert len(out) == 2
    assert cons.report.connection_lost and cons.report.trailing_bytes == 20


def test_env_port_override(rng, monkeypatch):
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    monkeypatch.setenv(stream.PORT_ENV, str(port))
    prod = Producer("127.0.0.1:1")
    assert prod.address[1] == port
    prod.close()


def test_real_time_factor():
    assert stream.real_time_factor(1000, 0.5, 1e-3) == pytest.approx(2.0)
    assert stream.real_time_factor(1, 0.0, 1e-3) == float("inf")


def test_wire_bytes_match_struct_layout(rng):
    cap = random_capture(rng, 3, 9, Pol.Y)
    raw = encode_frame(cap, 42)
    magic, ver, flags, seq, ts, sweep, n = struct.unpack_from("<4sBBQQQI", raw)
    assert (magic, ver, flags, seq, ts, sweep, n) == (b"OFDR", 1, 1, 42, 9_000_000, 9, 3)
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    assert crc == bitwise_crc32(raw[:-4])
