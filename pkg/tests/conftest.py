import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowsvdd.flow import FlowConfig, FlowModel  # noqa: E402

SMALL = FlowConfig(n_couplings=4, hidden_layers=2, hidden_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_flow(dim, seed=0, config=None):
    """A flow with every parameter random (not identity-initialized)."""
    return FlowModel.create(dim, np.random.default_rng(seed), config or FlowConfig(), identity=False)


def small_random_flow(dim, seed=0):
    return random_flow(dim, seed, SMALL)


# -- acceptance summary ---------------------------------------------------
# Tests marked ``criterion(number, title)`` are folded into one line per
# criterion at the end of the run. ``record_property("measured", text)``
# attaches the measured values to that line.

_criteria: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "states": [], "notes": []})
    if call.when == "setup" and call.excinfo is not None:
        skipped = call.excinfo.errisinstance(pytest.skip.Exception)
        entry["states"].append("skip" if skipped else "fail")
        if skipped:
            entry["notes"].append(str(call.excinfo.value.msg))
    elif call.when == "call":
        if call.excinfo is None:
            entry["states"].append("pass")
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            entry["states"].append("skip")
            entry["notes"].append(str(call.excinfo.value.msg))
        else:
            entry["states"].append("fail")
        entry["notes"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        states = entry["states"]
        if "fail" in states:
            verdict = "FAIL"
        elif states and all(s == "pass" for s in states):
            verdict = "PASS"
        else:
            verdict = "NOT RUN"
        notes = "; ".join(dict.fromkeys(entry["notes"]))
        line = f"criterion {number} [{verdict}] {entry['title']}"
        terminalreporter.write_line(line + (f": {notes}" if notes else ""))
