import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    num = dict(report.user_properties).get("criterion")
    if num is None:
        return
    entry = _CRITERIA.setdefault(num, {"title": "", "outcome": "passed", "details": []})
    entry["title"] = dict(report.user_properties).get("criterion_title", "")
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and entry["outcome"] == "passed" and report.when in ("setup", "call"):
        entry["outcome"] = "skipped"
    if report.when == "call":
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]


@pytest.fixture(autouse=True)
def _tag_criterion(request):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        request.node.user_properties.append(("criterion", mark.args[0]))
        request.node.user_properties.append(("criterion_title", mark.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[e["outcome"]]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {num:>2} {e['title']}: {verdict}" + (f"  [{detail}]" if detail else ""))
