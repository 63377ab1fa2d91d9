import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from beef.tensor import precision

settings.register_profile(
    "beef", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("beef")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def kink_safe_seeds(build, count=20, limit=400):
    """First ``count`` seeds whose forward keeps ReLU inputs clear of zero."""
    from beef.gradsuite import MIN_RELU_MARGIN
    from beef.gradcheck import relu_margin

    seeds = []
    for seed in range(limit):
        with precision(np.float64):
            f, _ = build(np.random.default_rng(seed))
            if relu_margin(f) >= MIN_RELU_MARGIN:
                seeds.append(seed)
        if len(seeds) == count:
            return seeds
    raise RuntimeError(f"only {len(seeds)} kink-safe seeds below {limit}")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion for the run summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
