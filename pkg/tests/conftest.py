import numpy as np
import pytest

from nasunet.autodiff import default_dtype, kernels


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.backend
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ----------------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "notes": []})
    if not rep.passed:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} {rep.outcome} in {rep.when}")
    for key, value in item.user_properties:
        if key == "detail":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        terminalreporter.write_line(line)
        for note in dict.fromkeys(e["notes"]):
            terminalreporter.write_line(f"              {note}")
