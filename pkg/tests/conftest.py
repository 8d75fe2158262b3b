import numpy as np
import pytest

from shieldkit.data import SetupConfig, generate_synthetic_dataset, make_public_and_victim
from shieldkit.engine import default_graph


@pytest.fixture(scope="session")
def small_setup():
    """A quickly trained public/victim pair on a reduced bundle (shared by attack tests)."""
    bundle = generate_synthetic_dataset(0, num_classes=4, per_class=200)
    graph = default_graph(4, seed=None)
    res = make_public_and_victim(0, graph, bundle, SetupConfig(public_epochs=10, finetune_epochs=8))
    return graph, bundle, res


# --------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

ACCEPTANCE = {}
DETAILS = {}


@pytest.fixture
def detail(request):
    """``detail("text")`` attaches a measured value to the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str):
        DETAILS[marker.args[0]] = text
        print(f"criterion {marker.args[0]}: {text}")
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n = marker.args[0]
    reason = "" if rep.passed else str(rep.longrepr).strip().splitlines()[-1][:160]
    ACCEPTANCE[n] = (rep.passed, "; ".join(x for x in (DETAILS.get(n, ""), reason) if x))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
