import re

import pytest
import torch

torch.set_num_threads(1)

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, tuple[str, str]] = {}


@pytest.fixture
def verdict(request):
    """Attach a one-line measurement to the acceptance summary for this criterion."""

    def record(detail: str) -> None:
        request.node.user_properties.append(("detail", detail))

    return record


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = next((v for k, v in report.user_properties if k == "detail"), "")
    if report.when == "call":
        _results[n] = ("PASS" if report.passed else "FAIL", detail)
    elif report.failed:
        _results[n] = ("FAIL", f"{report.when} error")
    elif report.skipped and n not in _results:
        _results[n] = ("SKIP", "")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
