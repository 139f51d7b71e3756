"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the
package under test.
"""

import math
import struct

import numpy as np


def direct_xcorr(x, ref):
    """O(N^2) circular cross-correlation ``c[l] = sum_n x[n] conj(ref[n-l])``."""
    n = len(x)
    out = np.zeros(n, dtype=complex)
    for lag in range(n):
        out[lag] = np.sum(x * np.conj(np.roll(ref, lag)))
    return out


def analytic(x):
    """Analytic signal by zeroing negative frequencies (direct DFT definition)."""
    n = len(x)
    spec = np.fft.fft(x)
    h = np.zeros(n)
    h[0] = 1
    if n % 2 == 0:
        h[n // 2] = 1
        h[1 : n // 2] = 2
    else:
        h[1 : (n + 1) // 2] = 2
    return np.fft.ifft(spec * h)


_CRC_TABLE = None


def bitwise_crc32(data: bytes) -> int:
    """Reflected CRC-32, polynomial 0xEDB88320, one bit at a time."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def golden_frame(sequence, timestamp_ns, sweep_index, pol_y, pairs):
    """Frame bytes assembled field by field from the documented layout."""
    out = bytearray(b"OFDR")
    out.append(1)
    out.append(1 if pol_y else 0)
    out += sequence.to_bytes(8, "little")
    out += timestamp_ns.to_bytes(8, "little")
    out += sweep_index.to_bytes(8, "little")
    out += len(pairs).to_bytes(4, "little")
    for xr, yr in pairs:
        out += struct.pack("<hh", xr, yr)
    out += bitwise_crc32(bytes(out)).to_bytes(4, "little")
    return bytes(out)


def sqnr_db(x, xq):
    return 10 * math.log10(np.mean(x**2) / np.mean((x - xq) ** 2))


def roundtrip_s(length_km, n_g=1.468):
    return 2 * length_km * n_g / 299792.458
