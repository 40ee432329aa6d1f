import verdicts


def pytest_terminal_summary(terminalreporter):
    ran = {int(item.nodeid.split("criterion_")[1].split("_")[0])
           for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance.py::test_criterion_" in item.nodeid}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        terminalreporter.write_line(verdicts.line(n))
