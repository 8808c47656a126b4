import numpy as np
import pytest
from hypothesis import settings

from loopcalc.coloring import ColoringModel, build_coloring_factor_graph
from loopcalc.generators import random_factor_graph

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40)
settings.load_profile("repo")

# criterion number -> (title, passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{title}]: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def triangle_coloring():
    return build_coloring_factor_graph(ColoringModel(((0, 1), (1, 2), (2, 0)), 3, 1.0))


def rand_graph(rng, n, scopes, q):
    return random_factor_graph(rng, n, scopes, q)
