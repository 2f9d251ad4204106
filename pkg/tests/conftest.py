import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from miqa import taskgen as tg

# single-threaded BLAS keeps float reductions reproducible across runs
threadpool_limits(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bases():
    return tg.gen_base_images(6, (32, 32), seed=3)


@pytest.fixture(scope="session")
def small_meta_set(small_bases):
    families = tg.default_families(["gaussian-noise", "brighten", "gaussian-blur", "darken"])
    meta, target = tg.lodo_split(families, "darken", small_bases, seed=0)
    return meta, target


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
