import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def fixture_template(tmp_path_factory):
    from chainview.fixtures import build_fixture_suite
    return build_fixture_suite(tmp_path_factory.mktemp("fixture_template"))


@pytest.fixture
def suite(fixture_template, tmp_path):
    """A private copy of the offline fixture suite (scenes, episodes, scripts, config.toml)."""
    dst = tmp_path / "suite"
    shutil.copytree(fixture_template, dst)
    return dst


_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    report = outcome.get_result()
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _ACCEPTANCE[name] = f"SKIP {name} ({reason.removeprefix('Skipped: ')})"
        else:
            state = "PASS" if report.passed else "FAIL"
            detail = getattr(item, "acceptance_detail", "")
            _ACCEPTANCE[name] = f"{state} {name}" + (f" [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE.values():
        terminalreporter.write_line(line)
