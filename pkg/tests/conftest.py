import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
_CRITERIA: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and rep.when != "call":
        detail = f"{rep.when} error"
    _CRITERIA[marker.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k)):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
