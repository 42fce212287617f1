import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    prev = _ACCEPTANCE.get(number, (title, None, 0.0))
    status = prev[1]
    if rep.failed:
        status = "FAIL"
    elif rep.skipped:
        status = status or "SKIP"
    elif rep.when == "call" and status is None:
        status = "PASS"
    # fixture setup time counts toward the criterion's runtime
    _ACCEPTANCE[number] = (title, status, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, duration = _ACCEPTANCE[number]
        status = status or "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  ({duration:.1f} s)")
