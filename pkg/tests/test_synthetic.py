import numpy as np
from scipy.spatial import cKDTree

from conftest import central_difference
from regmap.synthetic import (
    counterexample_map,
    phi1,
    phi1_inverse,
    phi2,
    phi2_jacobian,
    phi2_mirror,
)


def _grid(n):
    t = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(t, t)
    return np.column_stack([gx.ravel(), gy.ravel()])


def test_phi1_is_injective_onto_the_unit_triangle():
    x = _grid(200)
    y = phi1(x)
    assert np.all(y >= 0) and np.all(y.sum(axis=1) <= 1 + 1e-15)
    # distinct samples stay apart: no two images collide
    d, _ = cKDTree(y).query(y, k=2)
    assert d[:, 1].min() > 1e-4
    assert np.max(np.abs(phi1_inverse(y) - x)) < 1e-15


def test_composed_map_moves_the_corner_to_the_edge_midpoint():
    corner = np.array([[1.0, 1.0]])
    assert np.max(np.abs(counterexample_map(corner) - [1.0, 0.5])) < 1e-10
    assert np.max(np.abs(counterexample_map(corner, mirror=True) - [0.5, 1.0])) < 1e-10


def test_phi2_fixes_the_triangle_boundary_setwise():
    s = np.linspace(0, 1, 101)
    legs = np.vstack([np.column_stack([s, 0 * s]), np.column_stack([0 * s, s])])
    assert np.array_equal(phi2(legs), legs)
    hyp = np.column_stack([s, 1 - s])
    assert np.allclose(phi2(hyp).sum(axis=1), 1.0)
    assert np.allclose(phi2([[0.5, 0.5]]), [[0.75, 0.25]])
    assert np.allclose(phi2_mirror([[0.5, 0.5]]), [[0.25, 0.75]])


def test_phi2_jacobian_is_positive_and_matches_differences():
    rng = np.random.default_rng(0)
    x = rng.dirichlet([1, 1, 1], 500)[:, :2]
    for mirror, f in ((False, phi2), (True, phi2_mirror)):
        J = phi2_jacobian(x, mirror)
        assert J.min() > 0
        cols = [central_difference(f, x, e, 1e-6) for e in np.eye(2)]
        fd = cols[0][:, 0] * cols[1][:, 1] - cols[0][:, 1] * cols[1][:, 0]
        assert np.max(np.abs(fd - J)) < 1e-8
