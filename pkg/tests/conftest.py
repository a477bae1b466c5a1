import numpy as np
import pytest

from lgcpmap.geometry import PointPattern, Window, build_mesh


@pytest.fixture(scope="session")
def unit_square():
    return Window.rectangle(0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def coarse_mesh(unit_square):
    return build_mesh(unit_square, 0.5, outer_extension=0.0)


@pytest.fixture(scope="session")
def uniform_points():
    rng = np.random.default_rng(42)
    return rng.uniform(0.0, 1.0, size=(200, 2))


@pytest.fixture(scope="session")
def uniform_pattern(uniform_points):
    return PointPattern(uniform_points, np.zeros(len(uniform_points), dtype=int))
