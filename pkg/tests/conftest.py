import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ofdr.cablesim import CableModel, RepeaterModel, SpanModel
from ofdr.waveform import SweepConfig

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# 1 ms sweeps at a tenth of the desk rate: same ratios, 5000 samples per sweep
FAST = dict(sample_rate=5e6, if_center=1.5e6, sweep_bandwidth=1e6, sweep_period=1e-3, guard_band=0.05e6)


@pytest.fixture
def desk_cfg():
    return SweepConfig()


@pytest.fixture
def fast_cfg():
    return SweepConfig(**FAST)


def uniform_cable(n=8, length_km=10.0, jones=None, **kw):
    spans, reps = [], []
    for i in range(n):
        j = np.eye(2, dtype=complex) if jones is None else jones[i]
        spans.append(SpanModel(length_km, jones=j))
        reps.append(RepeaterModel(gain_db=0.2 * length_km))
    return CableModel(spans, reps, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# -- acceptance reporting -----------------------------------------------------
# Tests marked ``criterion(n, title)`` are summarized as one PASS/FAIL line per
# criterion at the end of the run; ``detail`` attaches a measured-value note.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    n, title = mark.args
    return _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})


@pytest.fixture
def detail(request):
    entry = _entry(request.node)
    notes = entry["notes"] if entry is not None else []
    return lambda text: notes.append(str(text))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        entry["ran"] = True
        entry["ok"] = entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "SKIP" if not e["ran"] else ("PASS" if e["ok"] else "FAIL")
        notes = "; ".join(e["notes"])
        tr.write_line(f"{status} C{n:<2} {e['title']}" + (f" [{notes}]" if notes else ""))
