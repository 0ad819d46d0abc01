import re

import pytest

from trainplan.layout import example_layout
from trainplan.machine import builtin_booster
from trainplan.script import example_plan
from trainplan.training import example_model, example_schedule

_acceptance = []


@pytest.fixture
def booster():
    return builtin_booster()


@pytest.fixture
def model():
    return example_model()


@pytest.fixture
def schedule():
    return example_schedule()


@pytest.fixture
def layout():
    return example_layout()


@pytest.fixture
def plan():
    return example_plan()


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        m = re.search(r"test_criterion_(\d+)", report.nodeid)
        if m:
            _acceptance.append((int(m.group(1)), report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, outcome in sorted(_acceptance):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {status}  ({name})")
