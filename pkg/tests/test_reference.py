from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regmap.reference import (
    edge_node_slices,
    gauss_legendre_01,
    gauss_lobatto,
    lattice_nodes,
    nodal_basis,
    simplex_quadrature,
)


def monomial_integral(a, b):
    # integral of x^a y^b over the unit right triangle
    return factorial(a) * factorial(b) / factorial(a + b + 2)


@pytest.mark.parametrize("q", range(1, 15))
def test_quadrature_exact_for_monomials(q):
    rule = simplex_quadrature(q)
    for a in range(q + 1):
        for b in range(q + 1 - a):
            got = rule.integrate(rule.points[:, 0] ** a * rule.points[:, 1] ** b)
            exact = monomial_integral(a, b)
            assert abs(got - exact) <= 1e-13 * exact


def test_quadrature_points_avoid_collapsed_vertex():
    rule = simplex_quadrature(8)
    x, y = rule.points.T
    # Radau nodes sit on the edge y = 0, never at the vertex (0, 1)
    assert np.all(x > 0) and np.all(y >= 0) and np.all(x + y < 1)
    assert np.all(rule.weights > 0)
    assert abs(rule.weights.sum() - 0.5) < 1e-15


@pytest.mark.parametrize("k", range(1, 9))
def test_lagrange_property(k):
    basis = nodal_basis(k)
    (vals,) = basis.eval(basis.nodes, derivatives=0)
    assert np.array_equal(vals, np.eye(basis.n_nodes))


@pytest.mark.parametrize("k", range(1, 9))
def test_partition_of_unity_and_derivatives(k):
    pts = np.random.default_rng(k).dirichlet([1, 1, 1], 50)[:, 1:]
    vals, grads, hess = nodal_basis(k).eval(pts, derivatives=2)
    assert np.max(np.abs(vals.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(grads.sum(axis=1))) < 1e-10
    assert np.max(np.abs(hess.sum(axis=1))) < 1e-8


@pytest.mark.parametrize("k", range(1, 7))
def test_reproduces_polynomials_of_degree_k(k):
    basis = nodal_basis(k)
    rng = np.random.default_rng(1)
    pts = rng.dirichlet([1, 1, 1], 40)[:, 1:]
    for a in range(k + 1):
        for b in range(k + 1 - a):
            f = lambda p: p[:, 0] ** a * p[:, 1] ** b  # noqa: E731
            vals, grads = basis.eval(pts)
            assert np.max(np.abs(vals @ f(basis.nodes) - f(pts))) < 1e-11
            dx = a * pts[:, 0] ** max(a - 1, 0) * pts[:, 1] ** b
            assert np.max(np.abs(grads[:, :, 0] @ f(basis.nodes) - dx)) < 1e-9


def test_node_ordering_vertices_edges_interior():
    nodes = lattice_nodes(3)
    assert np.allclose(nodes[:3], [[0, 0], [1, 0], [0, 1]])
    sl = edge_node_slices(3)
    # edge e runs from local vertex e to local vertex e+1
    assert sl[0][0] == 0 and sl[0][-1] == 1
    assert sl[1][0] == 1 and sl[1][-1] == 2
    assert sl[2][0] == 2 and sl[2][-1] == 0
    assert len(nodes) == 10


def test_one_dimensional_rules():
    t, w = gauss_legendre_01(5)
    assert abs(w @ t**9 - 0.1) < 1e-15
    gl = gauss_lobatto(5)
    assert gl[0] == 0.0 and gl[-1] == 1.0
    assert np.allclose(gl + gl[::-1], 1.0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.floats(0, 1), st.floats(0, 1))
def test_partition_of_unity_property(k, s, t):
    pt = np.array([[s * (1 - t), t]])
    vals, grads = nodal_basis(k).eval(pt)
    assert abs(vals.sum() - 1.0) < 1e-12
    assert np.max(np.abs(grads.sum(axis=1))) < 1e-10
