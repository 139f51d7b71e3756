"""Variance of the integrated phase per repeater over several seeds."""

import argparse

import numpy as np

from ofdr.dsp import pair_observations, phase_series
from ofdr.pipeline import process, sidecar, simulate
from ofdr.scenario import apply_overrides, build_scenario, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config")
    ap.add_argument("--repeaters", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--sweeps", type=int, default=64)
    ap.add_argument("--laser", default="FreeRunningFiber")
    args = ap.parse_args()

    base = build_scenario(load_config(args.config, [
        f"cable.uniform.count={args.repeaters}", f"run.n_sweeps={args.sweeps}", f"laser.kind={args.laser}",
    ]))
    rows = []
    for seed in range(args.seeds):
        scn = build_scenario(apply_overrides(base.config, [f"seed={seed}"]), calibrate=False)
        obs = list(process(simulate(scn), scn.sweep, scn.processing, sidecar(scn)["expected_delays_s"]))
        pairs = pair_observations(obs)
        row = []
        for k in range(1, args.repeaters + 1):
            s = phase_series([p for p in pairs if p.k == k])
            row.append(np.mean([np.var(s.phase[sl]) for sl in s.segments()]))
        rows.append(row)
    v = np.array(rows)
    steps = np.diff(v, axis=1)
    rng = np.random.default_rng(0)
    boot = np.array([steps[rng.integers(0, len(v), len(v))].mean(axis=0) for _ in range(2000)])
    lower = np.percentile(boot, 2.5, axis=0)
    for k in range(args.repeaters):
        step = f"   step lower95 {lower[k - 1]: .5f}" if k else ""
        print(f"k={k + 1}  Var {v[:, k].mean():.5f} rad^2{step}")


if __name__ == "__main__":
    main()
