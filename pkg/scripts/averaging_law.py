"""SNR gain from coherent averaging over W same-launch sweeps."""

import argparse

import numpy as np

from ofdr.dsp import Flag
from ofdr.pipeline import process, sidecar, simulate
from ofdr.scenario import build_scenario, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", help="scenario YAML (e.g. tests/fixtures/fast.yaml)")
    ap.add_argument("--snr", type=float, default=15.0, help="per-sweep SNR target in dB")
    ap.add_argument("--sweeps", type=int, default=400)
    ap.add_argument("--windows", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64])
    args = ap.parse_args()

    scn = build_scenario(load_config(args.config, [
        "laser=null", f"noise.calibrate_snr_db={args.snr}", "noise.averaging_s=0", f"run.n_sweeps={args.sweeps}",
    ]))
    caps = list(simulate(scn))
    expected = sidecar(scn)["expected_delays_s"]
    base = None
    print(" W   median SNR   gain   10log10 W")
    for w in args.windows:
        obs = process(caps, scn.sweep, {**scn.processing, "average": w}, expected)
        snr = float(np.median([o.snr_db for o in obs if o.sweep_index >= 2 * w and not o.flags & Flag.EDGE]))
        base = snr if base is None else base
        print(f"{w:3d}   {snr:8.2f}   {snr - base:6.2f}   {10 * np.log10(w):6.2f}")


if __name__ == "__main__":
    main()
