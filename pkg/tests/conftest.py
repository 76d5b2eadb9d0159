import time
from pathlib import Path

import numpy as np
import pytest

from profiledecomp.geometry import EuclideanModel, HyperbolicModel, MetricBump, PerturbedEuclideanModel

ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = ROOT / "scenarios"


def perturbed_model(radius: float = 2.5, amplitude: float = 0.05) -> PerturbedEuclideanModel:
    return PerturbedEuclideanModel(2, MetricBump((0.0, 0.0), radius, amplitude))


@pytest.fixture(scope="session")
def models():
    return {
        "euclidean": EuclideanModel(2),
        "hyperbolic": HyperbolicModel(2),
        "perturbed-euclidean": perturbed_model(),
    }


def random_points(model, rng, n: int, spread: float = 2.0) -> np.ndarray:
    """Model points at normal coordinates of norm < ``spread`` around the origin."""
    v = rng.uniform(-spread, spread, size=(n, model.dimension))
    if isinstance(model, HyperbolicModel):
        o = model.origin()
        return model.exp(o, model.canonical_frame(o), v)
    return v


# Acceptance bookkeeping: tests marked ``criterion(n)`` roll up into one
# pass/fail line per criterion in the terminal summary.
_CRITERIA: dict[int, dict] = {}
_SESSION_START = [0.0]
SUITE_BUDGET_SECONDS = 900.0


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


def pytest_sessionstart(session):
    _SESSION_START[0] = time.perf_counter()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"passed": True, "tests": 0, "details": []})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["passed"] = False


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line of the current test."""
    mark = request.node.get_closest_marker("criterion")

    def record(text: str) -> None:
        entry = _CRITERIA.setdefault(mark.args[0], {"passed": True, "tests": 0, "details": []})
        entry["details"].append(text)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(e["details"])
        tr.write_line(f"criterion {n}: {status} ({e['tests']} tests) {detail}".rstrip())
    elapsed = time.perf_counter() - _SESSION_START[0]
    status = "PASS" if elapsed < SUITE_BUDGET_SECONDS else "FAIL"
    tr.write_line(f"suite runtime: {status} ({elapsed:.0f} s, budget {SUITE_BUDGET_SECONDS:.0f} s)")
