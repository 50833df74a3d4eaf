import numpy as np
import pytest

from resm_merge.fixtures import FixtureSpec, write_fixtures

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixture_dir(tmp_path):
    """Default synthetic fixture set: base + 3 models."""
    write_fixtures(tmp_path, FixtureSpec())
    return tmp_path


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "acceptance" not in report.keywords:
        return
    label = report.nodeid.split("::")[-1]
    why = ""
    if report.failed:
        crash = getattr(report.longrepr, "reprcrash", None)
        why = crash.message.splitlines()[0] if crash else report.longreprtext.splitlines()[-1]
    _ACCEPTANCE.append((label, report.outcome.upper(), why))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, why in _ACCEPTANCE:
        line = f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {label}"
        if why:
            line += f"  ({why.strip()[:200]})"
        terminalreporter.write_line(line)
