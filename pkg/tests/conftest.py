import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    status, detail = _results.get(n, ("PASS", ""))
    for key, value in report.user_properties:
        if key == "detail":
            detail = value
    if report.failed:
        status = "FAIL"
        msg = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
        detail = msg.splitlines()[0][:200] if msg else detail
    elif report.skipped and status != "FAIL":
        status = "SKIP"
        detail = report.longrepr[2] if isinstance(report.longrepr, tuple) else detail
    _results[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, detail = _results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())
