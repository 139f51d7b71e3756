"""Command-line driver: ``ofdr <subcommand>``.

Exit status is 0 on success, 2 for configuration or usage errors and 1 for
runtime failures. Errors and warnings go to stderr as one JSON object per
line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, OFDRError
from .pipeline import (
    Manifest,
    SweepSpan,
    analyze,
    default_workers,
    process,
    read_sidecar,
    scenario_from_sidecar,
    sidecar,
    simulate,
    write_sidecar,
)
from .records import ObservationWriter, read_captures, read_observations, write_captures
from .scenario import PRESETS, apply_overrides, build_scenario, load_config
from .stream import Consumer, Producer, encode_frame

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _emit(kind: str, **fields) -> None:
    sys.stderr.write(json.dumps({kind: fields.pop("name", kind), **fields}, sort_keys=True) + "\n")


def warn(message: str, **extra) -> None:
    _emit("warning", name="warning", message=message, **extra)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario YAML file (or a preset name)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. sweep.sweep_period=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
    p.add_argument("--workers", type=int, help="threads for the per-sweep stages (0 = all cores)")


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        out.append(f"run.workers={args.workers}")
    return out


def _scenario(args):
    if args.config is None and args.preset is None:
        raise ConfigError("config", "give --config or --preset")
    cfg = load_config(args.config, _overrides(args), preset=args.preset)
    return build_scenario(cfg)


def _has_config(args) -> bool:
    return args.config is not None or args.preset is not None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    span = SweepSpan(simulate(scn))
    if args.out == "-":
        write_captures(sys.stdout.buffer, span)
        sys.stdout.buffer.flush()
        return EXIT_OK
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(args.manifest or str(out) + ".manifest.json", "simulate", scn)
    try:
        with out.open("wb") as fh:
            write_captures(fh, span)
        manifest.stage("simulate", sweeps=span.count)
    except BaseException as exc:
        manifest.fail("simulate", exc)
        manifest.write()
        raise
    side = write_sidecar(out, sidecar(scn))
    manifest.span(span.first, span.last, scn.sweep.sweep_period)
    manifest.add_outputs([out, side])
    manifest.write()
    return EXIT_OK


def _resolve_for_input(args, path: str):
    """Scenario for processing an input file: its sidecar, else --config/--preset."""
    side = read_sidecar(path) if path != "-" else None
    if side is not None:
        if args.overrides:
            side = {**side, "config": apply_overrides(side["config"], args.overrides)}
        return scenario_from_sidecar(side), side
    if not _has_config(args):
        warn("no sidecar next to the input and no --config; using the transatlantic-mini sweep with "
             "blind acquisition", input=path)
        args.preset = "transatlantic-mini"
    cfg = load_config(args.config, _overrides(args), preset=args.preset)
    cfg["noise"]["calibrate_snr_db"] = None  # noise is already in the data
    scn = build_scenario(cfg, calibrate=False)
    return scn, None


def cmd_process(args) -> int:
    if args.input != "-" and not Path(args.input).exists():
        raise FileNotFoundError(args.input)
    scn, side = _resolve_for_input(args, args.input)
    expected = side["expected_delays_s"] if side is not None else None
    if args.expected_from_config and side is None:
        from .cablesim import expected_delays

        expected = [float(x) for x in expected_delays(scn.cable)]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fmt = args.format or ("bin" if out.suffix == ".bin" else scn.processing["format"])
    rejects: list = []
    source = sys.stdin.buffer if args.input == "-" else args.input
    span = SweepSpan(read_captures(source, rejects=rejects))
    manifest = Manifest(args.manifest or str(out) + ".manifest.json", "process", scn)
    workers = default_workers(scn.workers)
    try:
        with ObservationWriter(out, fmt) as w:
            w.write(process(span, scn.sweep, scn.processing, expected, workers, scn.queue_depth))
        manifest.stage("process", sweeps=span.count, records=w.count)
    except BaseException as exc:
        manifest.fail("process", exc)
        manifest.write()
        raise
    for r in rejects:
        warn("rejected frame", reason=r.reason, claimed_sequence=r.claimed_sequence)
    if span.count == 0:
        warn("input holds no captures; wrote an empty observation file", input=str(args.input))
    outputs = [out]
    if side is not None or _has_config(args):
        outputs.append(write_sidecar(out, sidecar(scn) if side is None else side))
    manifest.span(span.first, span.last, scn.sweep.sweep_period)
    manifest.add_outputs(outputs)
    manifest.write()
    return EXIT_OK


def cmd_analyze(args) -> int:
    side = read_sidecar(args.input)
    if side is not None:
        scn = scenario_from_sidecar(side)
    elif _has_config(args):
        cfg = load_config(args.config, _overrides(args), preset=args.preset)
        scn = build_scenario(cfg, calibrate=False)
    else:
        raise ConfigError("config", "no sidecar next to the observations; give --config or --preset")
    obs = read_observations(args.input)
    products = args.products.split(",") if args.products else None
    out_dir = Path(args.out_dir)
    manifest = Manifest(args.manifest or out_dir / "manifest.json", "analyze", scn)
    try:
        written = analyze(obs, out_dir, scn.analysis, scn.sweep.sweep_period, products,
                          scn.processing["phase_convention"])
        manifest.stage("analyze", records=len(obs), files=len(written))
    except BaseException as exc:
        manifest.fail("analyze", exc)
        manifest.write()
        raise
    if obs:
        manifest.span(min(o.sweep_index for o in obs), max(o.sweep_index for o in obs),
                      scn.sweep.sweep_period)
    manifest.add_outputs(written)
    manifest.write()
    return EXIT_OK


def cmd_e2e(args) -> int:
    scn = _scenario(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir / scn.output["manifest"], "e2e", scn)
    obs_path = out_dir / scn.output["observations"]
    fmt = scn.processing["format"]
    if fmt == "bin" and obs_path.suffix != ".bin":
        obs_path = obs_path.with_suffix(".bin")
    stage = "simulate"
    try:
        span = SweepSpan(simulate(scn))
        stage = "process"
        workers = default_workers(scn.workers)
        with ObservationWriter(obs_path, fmt) as w:
            w.write(process(span, scn.sweep, scn.processing, sidecar(scn)["expected_delays_s"],
                            workers, scn.queue_depth))
        manifest.stage("simulate", sweeps=span.count)
        manifest.stage("process", sweeps=span.count, records=w.count)
        side = write_sidecar(obs_path, sidecar(scn))
        manifest.add_outputs([obs_path, side])
        stage = "analyze"
        obs = read_observations(obs_path, fmt)
        written = analyze(obs, out_dir / scn.output["analysis_dir"], scn.analysis,
                          scn.sweep.sweep_period, args.products.split(",") if args.products else None,
                          scn.processing["phase_convention"])
        manifest.stage("analyze", records=len(obs), files=len(written))
        manifest.add_outputs(written)
    except BaseException as exc:
        manifest.fail(stage, exc)
        manifest.write()
        raise
    manifest.span(span.first, span.last, scn.sweep.sweep_period)
    manifest.write()
    return EXIT_OK


def cmd_stream_tx(args) -> int:
    if args.replay:
        source = read_captures(args.replay)
        period = None
        if _has_config(args):
            period = load_config(args.config, _overrides(args), preset=args.preset)["sweep"]["sweep_period"]
    else:
        scn = _scenario(args)
        source = simulate(scn)
        period = scn.sweep.sweep_period
    producer = Producer(args.endpoint)
    host, port = producer.address
    _emit("listening", name="listening", host=host, port=port)
    pace = None
    if args.pace == "realtime":
        if period is None:
            raise ConfigError("pace", "realtime pacing needs the sweep period from --config/--preset")
        pace = period
    elif args.pace:
        pace = float(args.pace)
    stats = producer.serve(source, accept_timeout=args.accept_timeout, pace=pace)
    _emit("served", name="served", frames=stats.frames_sent, bytes=stats.bytes_sent,
          elapsed_s=round(stats.elapsed, 6))
    return EXIT_OK


def cmd_stream_rx(args) -> int:
    consumer = Consumer(args.endpoint, buffer_frames=args.buffer_frames,
                        connect_timeout=args.connect_timeout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out.open("wb") as fh:
        for cap in consumer:
            # rewrite with the consumer's own contiguous sequence; gaps live in the report
            fh.write(encode_frame(cap, count))
            count += 1
    report = consumer.report.as_dict()
    report_path = Path(args.report or str(out) + ".gaps.json")
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if report["gaps"] or report["rejects"] or report["connection_lost"]:
        warn("stream incomplete", gaps=len(report["gaps"]), rejects=len(report["rejects"]),
             connection_lost=report["connection_lost"])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofdr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate raw captures")
    _config_args(p)
    p.add_argument("--out", required=True, help="capture file, or - for stdout")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("process", help="captures to observation records")
    p.add_argument("input", help="capture file, or - for stdin")
    p.add_argument("output", help="observation file (.jsonl or .bin)")
    _config_args(p)
    p.add_argument("--format", choices=["jsonl", "bin"])
    p.add_argument("--expected-from-config", action="store_true",
                   help="monitor at the configured cable's delays instead of acquiring blind")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("analyze", help="observations to analysis products")
    p.add_argument("input")
    p.add_argument("out_dir")
    _config_args(p)
    p.add_argument("--products", help="comma list: phase,psd,spectrogram,delay,movement,summary")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("e2e", help="simulate, process and analyze in one pipeline")
    _config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--products")
    p.set_defaults(func=cmd_e2e)

    p = sub.add_parser("stream-tx", help="serve captures over TCP")
    _config_args(p)
    p.add_argument("--endpoint", default="127.0.0.1:0", help="host:port to listen on")
    p.add_argument("--replay", help="send frames from a capture file instead of simulating")
    p.add_argument("--pace", help="seconds per frame, or 'realtime'")
    p.add_argument("--accept-timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_stream_tx)

    p = sub.add_parser("stream-rx", help="receive captures over TCP into a capture file")
    p.add_argument("--endpoint", required=True, help="host:port to connect to")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="gap report path (default: <out>.gaps.json)")
    p.add_argument("--buffer-frames", type=int, default=4)
    p.add_argument("--connect-timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_stream_rx)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit("error", name="ConfigError", field=exc.field, message=exc.message)
        return EXIT_CONFIG
    except (OFDRError, OSError, ValueError) as exc:
        _emit("error", name=type(exc).__name__, message=str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
