"""Frequency-noise PSD of free-running and stabilized lasers, optionally to CSV."""

import argparse

import numpy as np

from ofdr.analysis import band_mean, frequency_noise_psd, write_psd_csv
from ofdr.cablesim import LaserModel, synth_laser_phase


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fs", type=float, default=8192.0)
    ap.add_argument("--log2n", type=int, default=22)
    ap.add_argument("--lag", type=int, default=32, help="self-heterodyne delay in samples (0 = direct)")
    ap.add_argument("--linewidth", type=float, default=100.0)
    ap.add_argument("--csv-prefix")
    args = ap.parse_args()

    reps = {}
    for i, kind in enumerate(("FreeRunningFiber", "CavityStabilized")):
        phase = synth_laser_phase(LaserModel(kind, args.linewidth), 2**args.log2n, args.fs, seed=i + 1)
        if args.lag:
            phase = phase[args.lag:] - phase[: -args.lag]
        reps[kind] = frequency_noise_psd(phase, args.fs, nperseg=65536)
        if args.csv_prefix:
            write_psd_csv(f"{args.csv_prefix}_{kind}.csv", reps[kind])
    free, stab = reps["FreeRunningFiber"], reps["CavityStabilized"]
    for lo, hi in ((0.1, 1.0), (1.0, 10.0), (10.0, 100.0), (100.0, 1000.0)):
        ratio = 10 * np.log10(band_mean(stab, lo, hi) / band_mean(free, lo, hi))
        print(f"[{lo:g}, {hi:g}) Hz  {ratio:6.2f} dB")


if __name__ == "__main__":
    main()
