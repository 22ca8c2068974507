import numpy as np
import pytest

from coxplain.synthbench import SynthSpec, generate

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark
    _, outcomes = _criteria.setdefault(number, (title, []))
    outcomes.append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        ok = bool(outcomes) and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_synth():
    """Small datasets for the three patterns (fast to train on)."""
    return {p: generate(SynthSpec(p, n=300, dims=(8, 8), seed=7))[0]
            for p in ("uniqueness", "xor-synergy", "redundancy")}
