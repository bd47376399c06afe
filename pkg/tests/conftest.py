import numpy as np
import pytest

from accim.partition import OverlapData, build_partition, compute_overlap
from accim.reduction import reduce_domain
from accim.system import identity, saddle, tent3

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"[{status}] AC{number}: {entry['title']}")


@pytest.fixture(scope="session")
def tent():
    return tent3()


@pytest.fixture(scope="session")
def saddle_map():
    return saddle()


@pytest.fixture(scope="session")
def identity_map():
    return identity()


@pytest.fixture(scope="session")
def tent_overlap():
    """Exact tent3 overlaps keyed by resolution."""
    system = tent3()
    cache = {}

    def get(n):
        if n not in cache:
            cache[n] = compute_overlap(system, build_partition(system.domain, n))
        return cache[n]

    return get


@pytest.fixture(scope="session")
def tent_reduced(tent_overlap):
    cache = {}

    def get(n):
        if n not in cache:
            cache[n] = reduce_domain(tent_overlap(n))
        return cache[n]

    return get


@pytest.fixture(scope="session")
def saddle_overlap():
    system = saddle()
    return compute_overlap(system, build_partition(system.domain, (100, 100)))


@pytest.fixture(scope="session")
def saddle_reduced(saddle_overlap):
    return reduce_domain(saddle_overlap)


@pytest.fixture(scope="session")
def single_cell():
    """One-cell aggregate of tent3: C = [[2/3]], c = [1/3]."""
    return reduce_domain(OverlapData.from_dense([[2.0 / 3.0]], [1.0 / 3.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)
