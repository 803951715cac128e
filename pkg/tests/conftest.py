import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("egokit", deadline=None, max_examples=40)
settings.load_profile("egokit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_local(rng, count=(), scale=0.4):
    """Random moderate local rotations for the 51 non-root joints."""
    from egokit.geometry import so3_exp

    shape = (count,) if isinstance(count, int) else tuple(count)
    return so3_exp(rng.normal(scale=scale, size=shape + (51, 3)))


def random_beta(rng, count=()):
    shape = (count,) if isinstance(count, int) else tuple(count)
    return rng.uniform(0.8, 1.2, size=shape + (2,))


ACCEPTANCE = []


def report(criterion, ok, detail):
    """Record one acceptance line; it is printed in the terminal summary."""
    ACCEPTANCE.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
