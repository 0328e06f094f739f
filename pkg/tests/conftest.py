import pytest

from atomarb.synth import SynthPlan, generate

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    ok = _CRITERIA.get(number, (title, True))[1]
    if report.failed or (report.when == "call" and report.skipped):
        ok = False
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def small_ledger():
    return generate(SynthPlan(seed=11, block_count=60))


@pytest.fixture(scope="session")
def ledger_dir(tmp_path_factory, small_ledger):
    out = tmp_path_factory.mktemp("ledger")
    small_ledger.write(out)
    return out
