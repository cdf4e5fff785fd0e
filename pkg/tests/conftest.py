import os

# the suite runs with intra-op parallelism disabled
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dlkd import enhance  # noqa: E402
from dlkd.data import DarkenParams, darken_dataset, generate_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _fresh_enhancement_counter():
    enhance.reset_enhancement_calls()
    yield


@pytest.fixture(scope="session")
def toy_dataset():
    """2-class, 8-clip dark set used by the overfit and pipeline tests."""
    bright = generate_dataset(2, 4, (3, 8, 32, 32), seed=11)
    return darken_dataset(bright, DarkenParams(seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per @pytest.mark.criterion test

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    details = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    passed = report.passed and report.when == "call"
    if report.skipped:
        status = "SKIP"
    else:
        status = "PASS" if passed else "FAIL"
    _criteria[number] = (status, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, details = _criteria[number]
        line = f"[{status}] criterion {number}: {title}"
        if details:
            line += f" | {details}"
        terminalreporter.write_line(line)
