"""Delay drift on one or more spans: per-repeater change and span correlation.

    python scripts/delay_tracking.py --drift 3:5
    python scripts/delay_tracking.py --drift 4:5 --drift 5:-5 --average 16
"""

import argparse

import numpy as np

from ofdr.analysis import span_movement_report
from ofdr.dsp import delay_series
from ofdr.pipeline import process, sidecar, simulate
from ofdr.scenario import build_scenario, load_config

RIG = ["sweep.sample_rate=30e6", "sweep.if_center=9e6", "sweep.sweep_period=2e-4", "laser.kind=CavityStabilized"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--drift", action="append", default=[], metavar="SPAN:NS")
    ap.add_argument("--repeaters", type=int, default=6)
    ap.add_argument("--sweeps", type=int, default=4000)
    ap.add_argument("--average", type=int, default=1)
    ap.add_argument("--start", type=float, default=0.2)
    ap.add_argument("--stop", type=float, default=0.6)
    args = ap.parse_args()

    drift = ", ".join(
        f"{{span: {d.split(':')[0]}, ns: {d.split(':')[1]}, start: {args.start}, stop: {args.stop}}}"
        for d in args.drift
    )
    scn = build_scenario(load_config(overrides=[
        *RIG, f"cable.uniform={{count: {args.repeaters}, length_km: 1.0}}",
        f"run.n_sweeps={args.sweeps}", f"processing.average={args.average}", f"drift=[{drift}]",
    ]))
    obs = list(process(simulate(scn), scn.sweep, scn.processing, sidecar(scn)["expected_delays_s"]))
    series = {k: delay_series(obs, k) for k in range(1, args.repeaters + 1)}
    for k, (_, d) in series.items():
        e = len(d) // 10
        print(f"k={k}  change {(d[-e:].mean() - d[:e].mean()) * 1e9:7.3f} ns  jitter {np.std(np.diff(d)) * 1e9 / np.sqrt(2):.3f} ns")
    rep = span_movement_report(series)
    print("span movement (ns):", np.round(rep.movement_ns, 3).tolist())
    print("flagged:", rep.flagged)


if __name__ == "__main__":
    main()
