"""Scenario files: YAML text, presets and dotted-path overrides.

A scenario is a nested mapping with sections ``sweep``, ``cable``,
``laser``, ``noise``, ``events``, ``drift``, ``run``, ``processing``,
``analysis`` and ``output``. :func:`load_config` merges a file or preset
over the defaults and applies ``--set a.b=value`` overrides;
:func:`build_scenario` turns the mapping into model objects (calibrating
the noise floor when asked to).
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .cablesim import (
    CableModel,
    LaserModel,
    PerturbationEvent,
    RepeaterModel,
    SpanModel,
    calibrate_noise_floor,
    equivalent_sweeps,
    random_unitary,
)
from .errors import CalibrationError, ConfigError
from .waveform import SweepConfig

SECTIONS = ("name", "seed", "sweep", "cable", "laser", "noise", "events", "drift",
            "run", "processing", "analysis", "output")

DEFAULTS: dict[str, Any] = {
    "name": "custom",
    "seed": 7,
    "sweep": {
        "sample_rate": 50e6,
        "if_center": 15e6,
        "sweep_bandwidth": 10e6,
        "sweep_period": 1e-3,
        "dac_bits": 14,
        "adc_bits": 14,
        "pol_scheme": "TimeInterleaved",
        "guard_band": 0.5e6,
    },
    "cable": {
        "uniform": {"count": 8, "length_km": 10.0},
        "spans": None,
        "group_index": 1.468,
        "loss_db_per_km": 0.2,
        "jones": "random",
        "repeater": {"gain_db": None, "hllb_coupling_db": -45.0},
        "return_correlation": 1.0,
        "couple_delay_phase": False,
        "carrier_hz": 193.4e12,
    },
    "laser": {"kind": "FreeRunningFiber", "linewidth": 100.0, "flicker_coefficient": 0.0,
              "stabilization_gain_table": []},
    "noise": {
        "ase_density": None,
        "calibrate_snr_db": 30.0,
        "averaging_s": 1.0,
        "calibration_seed": 11,
        "extra_density": 0.0,
    },
    "events": [],
    "drift": [],
    "run": {"n_sweeps": 512, "start_sweep": 0, "workers": 0, "queue_depth": 8},
    "processing": {
        "average": 16,
        "mode": "coherent",
        "threshold_db": 6.0,
        "expected_delays": True,
        "acquire_sweeps": 16,
        "acquire_threshold_db": 10.0,
        "search_bins": 3,
        "alpha": 0.1,
        "phase_convention": "max_element",
        "format": "jsonl",
    },
    "analysis": {
        "products": ["phase", "psd", "spectrogram", "delay", "movement", "summary"],
        "spectrogram_window": 64,
        "spectrogram_overlap": None,
        "spectrogram_band": [0.1, 10.0],
        "psd_segments": 8,
        "movement_window": None,
        "movement_threshold": -0.8,
    },
    "output": {
        "captures": "captures.ofdr",
        "observations": "observations.jsonl",
        "analysis_dir": "analysis",
        "manifest": "manifest.json",
    },
}

PRESETS: dict[str, dict] = {
    "transatlantic-mini": {
        "name": "transatlantic-mini",
        "seed": 7,
        "cable": {"uniform": {"count": 8, "length_km": 10.0}, "jones": "random"},
        "laser": {"kind": "FreeRunningFiber", "linewidth": 100.0},
        "noise": {"calibrate_snr_db": 30.0, "averaging_s": 1.0},
        "run": {"n_sweeps": 512},
        # each simulated sweep already carries the 1 s-averaged noise floor
        "processing": {"average": 1},
        "analysis": {"spectrogram_band": [1.0, 250.0]},
    },
    # Field-scale rates: 120 M samples per sweep. Heavy; meant for validation
    # and sizing, not for desk runs.
    "transatlantic-full": {
        "name": "transatlantic-full",
        "seed": 7,
        "sweep": {
            "sample_rate": 2e9,
            "if_center": 500e6,
            "sweep_bandwidth": 125e6,
            "sweep_period": 60e-3,
            "guard_band": 5e6,
        },
        "cable": {"uniform": {"count": 80, "length_km": 75.0}, "jones": "random"},
        "laser": {"kind": "CavityStabilized", "linewidth": 100.0},
        "noise": {"ase_density": None, "calibrate_snr_db": 30.0, "averaging_s": 1.0},
        "run": {"n_sweeps": 32},
    },
}


# ---------------------------------------------------------------------------
# Loading and overrides


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+
    |[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if path == "" and key not in SECTIONS:
            raise ConfigError(where, "unknown section")
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "uniform":
            out[key] = deep_merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with ``value`` read as YAML (numbers, lists, null...)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(text, "override must look like section.key=value")
    try:
        value = _yaml(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(key.strip(), f"cannot parse value {raw!r}: {exc}") from None
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, value = parse_override(text)
        if keys[0] not in SECTIONS:
            raise ConfigError(".".join(keys), "unknown section")
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
    return cfg


def load_config(source: str | Path | None = None, overrides: Sequence[str] = (),
                preset: str | None = None) -> dict:
    """Resolve a scenario mapping from a preset and/or YAML file plus overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = deep_merge(cfg, PRESETS[preset])
    if source is not None:
        path = Path(source)
        if not path.exists() and str(source) in PRESETS:
            cfg = deep_merge(cfg, PRESETS[str(source)])
        else:
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError("config", f"cannot read {source}: {exc.strerror}") from None
            try:
                data = _yaml(text) or {}
            except yaml.YAMLError as exc:
                raise ConfigError("config", f"invalid YAML: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config", "top level must be a mapping")
            cfg = deep_merge(cfg, data)
    return apply_overrides(cfg, overrides)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# Building model objects


@dataclass(eq=False)
class Scenario:
    name: str
    seed: int
    sweep: SweepConfig
    cable: CableModel
    laser: LaserModel | None
    n_sweeps: int
    start_sweep: int
    workers: int
    queue_depth: int
    processing: dict
    analysis: dict
    output: dict
    config: dict  # resolved: a calibrated density is written back into noise.ase_density
    calibration: dict

    @property
    def noise_seed(self) -> int:
        return self.seed

    def seeds(self) -> dict:
        return {
            "master": self.seed,
            "cable": self.cable.seed,
            "noise": self.noise_seed,
            "laser": self.seed ^ 0x1A5E,
            "calibration": int(self.config["noise"].get("calibration_seed") or 0),
        }


def _section(cfg: dict, name: str) -> dict:
    val = cfg.get(name) or {}
    if not isinstance(val, dict):
        raise ConfigError(name, "must be a mapping")
    return val


def _build_sweep(sec: dict) -> SweepConfig:
    allowed = set(DEFAULTS["sweep"])
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"sweep.{key}", "unknown field")
    try:
        return SweepConfig(**{k: sec[k] for k in allowed if k in sec})
    except ConfigError as exc:
        raise ConfigError(f"sweep.{exc.field}", exc.message) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("sweep", str(exc)) from None


def _jones(spec, rng: np.random.Generator, where: str) -> np.ndarray:
    if spec is None or spec == "identity":
        return np.eye(2, dtype=complex)
    if spec == "random":
        return random_unitary(rng)
    try:
        arr = np.asarray(spec, dtype=float)
        if arr.shape == (2, 2, 2):  # [[re, im], ...] pairs
            return arr[..., 0] + 1j * arr[..., 1]
        return arr.reshape(2, 2).astype(complex)
    except (TypeError, ValueError):
        raise ConfigError(where, "jones must be 'identity', 'random' or a 2x2 matrix") from None


def _build_cable(cfg: dict, seed: int) -> CableModel:
    sec = _section(cfg, "cable")
    rng = np.random.default_rng([seed, 0x5A4E])
    per_km = float(sec.get("loss_db_per_km", 0.2))
    n_g = float(sec.get("group_index", 1.468))
    rep_defaults = dict(sec.get("repeater") or {})
    spans_spec = sec.get("spans")
    if spans_spec:
        specs = list(spans_spec)
    else:
        uni = sec.get("uniform") or {}
        count = uni.get("count")
        if count is None or int(count) < 0:
            raise ConfigError("cable.uniform.count", "must be a non-negative integer")
        specs = [{"length_km": uni.get("length_km", 10.0)} for _ in range(int(count))]
    spans, reps = [], []
    for i, sp in enumerate(specs, start=1):
        where = f"cable.spans[{i}]"
        if not isinstance(sp, dict):
            raise ConfigError(where, "must be a mapping")
        length = float(sp.get("length_km", 10.0))
        loss = sp.get("loss_db")
        loss = per_km * length if loss is None else float(loss)
        jones = _jones(sp.get("jones", sec.get("jones", "identity")), rng, f"{where}.jones")
        jret = sp.get("jones_return")
        jret = None if jret is None else _jones(jret, rng, f"{where}.jones_return")
        try:
            spans.append(SpanModel(length, float(sp.get("group_index", n_g)), loss, jones, jret))
        except ConfigError as exc:
            raise ConfigError(f"{where}.{exc.field.rsplit('.', 1)[-1]}", exc.message) from None
        rep = {**rep_defaults, **(sp.get("repeater") or {})}
        gain = rep.get("gain_db")
        gain = loss if gain is None else float(gain)  # gain offsets the span loss by default
        reps.append(RepeaterModel(gain, float(rep.get("hllb_coupling_db", -45.0)),
                                  float(rep.get("ase_noise_density", 0.0))))
    events = _build_events(cfg, len(spans))
    noise = _section(cfg, "noise")
    try:
        return CableModel(
            spans, reps, seed=seed, events=events,
            return_correlation=float(sec.get("return_correlation", 1.0)),
            couple_delay_phase=bool(sec.get("couple_delay_phase", False)),
            carrier_hz=float(sec.get("carrier_hz", 193.4e12)),
            extra_noise_density=float(noise.get("extra_density") or 0.0),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("cable", str(exc)) from None


def _build_events(cfg: dict, n_spans: int) -> list[PerturbationEvent]:
    out = []
    for i, ev in enumerate(cfg.get("events") or []):
        where = f"events[{i}]"
        if not isinstance(ev, dict):
            raise ConfigError(where, "must be a mapping")
        try:
            out.append(PerturbationEvent(
                kind=ev["kind"],
                span_index=int(ev.get("span", ev.get("span_index"))),
                amplitude=float(ev["amplitude"]),
                frequency=float(ev.get("frequency", 0.0)),
                start=float(ev.get("start", 0.0)),
                stop=float(ev.get("stop", math.inf)),
                target=ev.get("target"),
                frequency_end=None if ev.get("frequency_end") is None else float(ev["frequency_end"]),
            ))
        except KeyError as exc:
            raise ConfigError(f"{where}.{exc.args[0]}", "missing") from None
        except ConfigError as exc:
            raise ConfigError(f"{where}.{exc.field.rsplit('.', 1)[-1]}", exc.message) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(where, str(exc)) from None
    for i, d in enumerate(cfg.get("drift") or []):
        where = f"drift[{i}]"
        try:
            out.append(PerturbationEvent(
                "LinearDriftNs", int(d["span"]), float(d["ns"]),
                start=float(d.get("start", 0.0)), stop=float(d["stop"]),
            ))
        except KeyError as exc:
            raise ConfigError(f"{where}.{exc.args[0]}", "missing") from None
        except ConfigError as exc:
            raise ConfigError(f"{where}.{exc.field.rsplit('.', 1)[-1]}", exc.message) from None
    return out


def _build_laser(cfg: dict) -> LaserModel | None:
    sec = cfg.get("laser")
    if sec is None or sec in ("none", "off"):
        return None
    try:
        return LaserModel(
            kind=sec.get("kind", "FreeRunningFiber"),
            linewidth=float(sec.get("linewidth", 100.0)),
            flicker_coefficient=float(sec.get("flicker_coefficient", 0.0)),
            stabilization_gain_table=tuple(tuple(b) for b in sec.get("stabilization_gain_table") or ()),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("laser", str(exc)) from None


def build_scenario(cfg: dict, *, calibrate: bool = True) -> Scenario:
    """Construct model objects, validate invariants and resolve the noise floor.

    With ``noise.ase_density`` unset and ``noise.calibrate_snr_db`` given, the
    per-repeater ASE density is calibrated so every repeater reads that SNR
    after ``noise.averaging_s`` seconds of coherent averaging.
    """
    try:
        seed = int(cfg.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed", "must be an integer") from None
    sweep = _build_sweep(_section(cfg, "sweep"))
    cable = _build_cable(cfg, seed)
    cable.check_unambiguous(sweep)
    laser = _build_laser(cfg)
    run = _section(cfg, "run")
    n_sweeps = int(run.get("n_sweeps", 0))
    if n_sweeps < 0:
        raise ConfigError("run.n_sweeps", "must be non-negative")
    noise = _section(cfg, "noise")
    calibration: dict = {}
    density = noise.get("ase_density")
    if density is not None:
        density = float(density)
        if density < 0:
            raise ConfigError("noise.ase_density", "must be non-negative")
    elif noise.get("calibrate_snr_db") is not None and calibrate and cable.n_repeaters:
        averaging = float(noise.get("averaging_s", 1.0))
        target = float(noise["calibrate_snr_db"])
        cal_seed = int(noise.get("calibration_seed") or 0)
        try:
            d_eq = calibrate_noise_floor(cable, sweep, target, averaging, laser=laser, seed=cal_seed)
        except CalibrationError as exc:
            raise ConfigError("noise.calibrate_snr_db", str(exc)) from None
        density = d_eq / equivalent_sweeps(sweep, averaging)
        calibration = {
            "target_snr_db": target,
            "averaging_s": averaging,
            "equivalent_sweeps": equivalent_sweeps(sweep, averaging),
            "ase_density": density,
            "seed": cal_seed,
        }
    resolved = copy.deepcopy(cfg)
    if density is not None:
        resolved.setdefault("noise", {})["ase_density"] = density
    if density:
        cable = cable.with_uniform_ase(density)
    proc = {**DEFAULTS["processing"], **_section(cfg, "processing")}
    if proc["mode"] not in ("coherent", "power"):
        raise ConfigError("processing.mode", "must be 'coherent' or 'power'")
    if proc["phase_convention"] not in ("max_element", "det"):
        raise ConfigError("processing.phase_convention", "must be 'max_element' or 'det'")
    if int(proc["average"]) < 1:
        raise ConfigError("processing.average", "must be >= 1")
    if proc["format"] not in ("jsonl", "bin"):
        raise ConfigError("processing.format", "must be 'jsonl' or 'bin'")
    return Scenario(
        name=str(cfg.get("name", "custom")),
        seed=seed,
        sweep=sweep,
        cable=cable,
        laser=laser,
        n_sweeps=n_sweeps,
        start_sweep=int(run.get("start_sweep", 0)),
        workers=int(run.get("workers") or 0),
        queue_depth=max(1, int(run.get("queue_depth") or 8)),
        processing=proc,
        analysis={**DEFAULTS["analysis"], **_section(cfg, "analysis")},
        output={**DEFAULTS["output"], **_section(cfg, "output")},
        config=resolved,
        calibration=calibration,
    )
