import sys


def pytest_terminal_summary(terminalreporter):
    # echo the per-criterion verdicts even when output capture hid the prints
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
