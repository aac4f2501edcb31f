import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# criterion number -> (title, outcome) for the acceptance summary
_ACCEPTANCE: dict[int, tuple[str, str]] = {}
# measured values printed under the summary, keyed by criterion
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    prev = _ACCEPTANCE.get(number, (title, "PASS"))[1]
    if rep.failed:
        _ACCEPTANCE[number] = (title, "FAIL")
    elif rep.when == "call" and rep.skipped:
        _ACCEPTANCE[number] = (title, "SKIP")
    elif rep.when == "call":
        _ACCEPTANCE[number] = (title, prev)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, result = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{number:2d}] {result:4s}  {title}")
        for line in _NOTES.get(number, []):
            terminalreporter.write_line(f"        {line}")


@pytest.fixture
def measured(request):
    """``measured("name", value)`` attaches a measured value to the test's acceptance criterion."""
    marker = request.node.get_closest_marker("acceptance")
    number = marker.args[0] if marker else 0

    def note(name, value):
        text = f"{value:.4g}" if isinstance(value, float) else str(value)
        _NOTES.setdefault(number, []).append(f"{name} = {text}")

    return note


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
