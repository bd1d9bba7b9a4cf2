import numpy as np
import pytest
from hypothesis import settings

from cemgms.grid import build_coarse_grid, build_fine_mesh, partition_of_unity

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mesh8():
    return build_fine_mesh(8, 8)


@pytest.fixture(scope="session")
def setup16():
    mesh = build_fine_mesh(16, 16)
    grid = build_coarse_grid(mesh, 4)
    return mesh, grid, partition_of_unity(grid)


def random_beta(mesh, rng, low=1.0, high=1.0e4, frac=0.2):
    """Two-level per-cell field kept away from the boundary."""
    c = mesh.centroids
    inner = (c[:, 0] > 0.25) & (c[:, 0] < 0.75) & (c[:, 1] > 0.25) & (c[:, 1] < 0.75)
    high_cells = inner & (rng.random(mesh.n_cells) < frac)
    return np.where(high_cells, high, low)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records a criterion line and asserts it."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
