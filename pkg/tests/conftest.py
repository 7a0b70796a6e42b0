import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bdsdelab.lattice import Field

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def level_table(field: Field, level: int) -> np.ndarray:
    """Dense table of ``field`` on the level-``level`` scenario grid."""
    return np.asarray(field.at_level(level).dense())


def max_level_gap(a, b) -> float:
    """Largest entrywise difference between two sequences of level fields."""
    return max(float(np.abs(level_table(x, i) - level_table(y, i)).max()) for i, (x, y) in enumerate(zip(a, b)))


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    label, title = mark.args
    entry = _CRITERIA.setdefault(label, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
        entry["notes"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")

    def key(label):
        digits = "".join(ch for ch in label if ch.isdigit())
        return int(digits), label

    for label in sorted(_CRITERIA, key=key):
        e = _CRITERIA[label]
        status = "PASS" if e["ok"] else "FAIL"
        extra = f"  (failing: {', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {label}: {status}  {e['title']}{extra}")
