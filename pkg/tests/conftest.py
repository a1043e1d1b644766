import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(label): criterion covered by this test; prints one PASS/FAIL line",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    terminal = item.config.pluginmanager.get_plugin("terminalreporter")
    if terminal is None:
        return
    status = "PASS" if report.passed else "FAIL"
    terminal.write_line(f"ACCEPTANCE {marker.args[0]}: {status}")
