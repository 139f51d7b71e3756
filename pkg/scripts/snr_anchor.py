"""Per-repeater SNR on a preset after noise calibration.

    python scripts/snr_anchor.py --preset transatlantic-mini --sweeps 64
"""

import argparse
import time

import numpy as np

from ofdr.pipeline import process, sidecar, simulate
from ofdr.scenario import PRESETS, build_scenario, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="transatlantic-mini", choices=sorted(PRESETS))
    ap.add_argument("--sweeps", type=int, default=64)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    t = time.perf_counter()
    scn = build_scenario(load_config(preset=args.preset, overrides=[f"run.n_sweeps={args.sweeps}", *args.overrides]))
    print(f"calibrated density {scn.calibration.get('ase_density', float('nan')):.3e} "
          f"({time.perf_counter() - t:.1f} s)")
    obs = list(process(simulate(scn), scn.sweep, scn.processing, sidecar(scn)["expected_delays_s"]))
    for k in sorted({o.k for o in obs}):
        snr = np.array([o.snr_db for o in obs if o.k == k])
        print(f"k={k:2d}  median {np.median(snr):6.2f} dB  p10 {np.percentile(snr, 10):6.2f}  p90 {np.percentile(snr, 90):6.2f}")
    print(f"total {time.perf_counter() - t:.1f} s")


if __name__ == "__main__":
    main()
