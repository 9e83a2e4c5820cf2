import numpy as np
import pytest

from cel.candidates import SyntheticSpec, generate_instance_dependent, synthesize_gaussian, train_aux_scorer
from cel.data import PartialLabelDataset

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, {"title": title, "outcomes": [], "flags": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)
    flag = dict(report.user_properties).get("flag")
    if flag and report.when == "call":
        entry["flags"].append(flag)


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", tuple(marker.args))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        ok = entry["outcomes"] and all(o == "passed" for o in entry["outcomes"])
        status = "PASS" if ok else "FAIL"
        if ok and entry["flags"]:
            status = "PASS (flagged)"
        terminalreporter.write_line(f"criterion {number:2d}: {status:15s} {entry['title']}")
        for flag in entry["flags"]:
            terminalreporter.write_line(f"               note: {flag}")


def make_partial_dataset(q=4, d=6, m=240, overlap=0.8, rate=0.3, seed=0):
    X, y, space = synthesize_gaussian(SyntheticSpec(q=q, d=d, m=m, overlap=overlap, seed=seed))
    scores = train_aux_scorer(X, y, epochs=60, seed=seed, q=q)
    S = generate_instance_dependent(scores, y, rate, seed)
    return PartialLabelDataset(X, y, S, space, {"source": "test"})


@pytest.fixture(scope="session")
def small_ds():
    return make_partial_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
