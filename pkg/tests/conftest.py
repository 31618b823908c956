import numpy as np
import pytest

from bytemt.corpus import ParallelCorpus

DIGIT_WORDS = "zero one two three four five six seven eight nine".split()


def digit_pairs(n, rng, max_digits=6):
    pairs = []
    for _ in range(n):
        k = int(rng.integers(1, max_digits + 1))
        digits = rng.integers(0, 10, k)
        pairs.append(("".join(map(str, digits)), " ".join(DIGIT_WORDS[d] for d in digits)))
    return pairs


@pytest.fixture
def digit_corpus():
    rng = np.random.default_rng(0)
    return ParallelCorpus(tuple(digit_pairs(300, rng)), "num", "en")


# --- acceptance reporting: one PASS/FAIL line per criterion ---------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        note = "; ".join(str(v) for k, v in item.user_properties if k == "note")
        previous = _criteria.get(number)
        if previous is None or previous[1] == "PASS":
            _criteria[number] = (title, status, note)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, note = _criteria[number]
        suffix = f" ({note})" if note else ""
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}{suffix}")
