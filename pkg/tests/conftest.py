from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import pytest

_CRITERIA: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: runs the full pipeline")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = getattr(report, "criterion", None)
    if number is not None:
        _CRITERIA.setdefault(number, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcomes = _CRITERIA[number]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}")


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """One desk-scale ``reproduce`` shared by the end-to-end criteria.

    Set ``XDSSL_REUSE_RUN`` to an existing output directory to skip the
    (roughly quarter-hour) pipeline and check a previous run instead.
    """
    from xdssl.pipeline import ExperimentConfig, reproduce

    reuse = os.environ.get("XDSSL_REUSE_RUN")
    if reuse:
        out = Path(reuse)
        report = json.loads((out / "report" / "report.json").read_text())
        return out, report, float(json.loads((out / "elapsed.json").read_text())["seconds"])
    logging.basicConfig(level=logging.INFO)
    out = tmp_path_factory.mktemp("reproduce")
    t0 = time.perf_counter()
    report = reproduce(ExperimentConfig(seed=0), out)
    elapsed = time.perf_counter() - t0
    (out / "elapsed.json").write_text(json.dumps({"seconds": elapsed}) + "\n")
    return out, report, elapsed
