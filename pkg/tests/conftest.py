import numpy as np
import pytest

from regmap.mesh import linearize
from regmap.space import build_displacement_space
from regmap.synthetic import bump_channel_mesh, semicircle_mesh


@pytest.fixture(scope="session")
def semicircle():
    cm = semicircle_mesh(4)
    pm, gm = linearize(cm)
    return cm, pm, gm, build_displacement_space(pm, 4)


@pytest.fixture(scope="session")
def channel():
    cm = bump_channel_mesh(6)
    pm, gm = linearize(cm)
    return cm, pm, gm, build_displacement_space(pm, 6)


def random_polytope_points(pm, n, seed=0):
    rng = np.random.default_rng(seed)
    lam = rng.dirichlet([1.0, 1.0, 1.0], n)
    el = rng.integers(0, pm.tri.n_elements, n)
    return np.einsum("pi,pid->pd", lam, pm.vertices[pm.triangles[el]])


def central_difference(fun, x, direction, h=1e-6):
    return (fun(x + h * direction) - fun(x - h * direction)) / (2.0 * h)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
