import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regmap.errors import InconsistentPeriodicity
from regmap.mesh import BoundaryFacet, CurvedMesh, linearize
from regmap.space import DisplacementSpace, build_displacement_space
from regmap.synthetic import bump_channel_mesh, semicircle_mesh, structured_triangles


def test_basis_is_orthonormal(semicircle, channel):
    for *_, space in (semicircle, channel):
        g = space.gram_in_basis()
        assert np.max(np.abs(g - np.eye(space.dim))) < 1e-10


def test_basis_vanishes_at_polytope_vertices_and_is_tangential(channel):
    _, pm, _, space = channel
    U = space.basis_nodal()
    assert np.all(U[:, pm.polytope_vertices, :] == 0.0)
    for eid in pm.boundary_edge_ids:
        t = pm.edge_tangent(int(eid))
        nrm = np.array([-t[1], t[0]])
        nodes = space.scalar.edge_dofs[eid]
        assert np.max(np.abs(U[:, nodes, :] @ nrm)) < 1e-14


def test_dimension_count_for_channel(channel):
    # fan of four straight triangles: 2 * interior nodes plus 1 per boundary node
    _, pm, _, space = channel
    k = space.degree
    n = space.n_nodes
    n_bnd_inner = len(pm.boundary_edge_ids) * (k - 1)
    n_vertices_fixed = len(pm.polytope_vertices)
    n_free = n - n_bnd_inner - n_vertices_fixed
    assert space.dim == 2 * n_free + n_bnd_inner


def _random_nodal(space, seed):
    return np.random.default_rng(seed).standard_normal((space.n_nodes, 2))


@pytest.mark.parametrize("broken", [False, True])
def test_seminorm_matrix_matches_pointwise_quadrature(semicircle, broken):
    # two independent routes: assembled sparse forms vs direct quadrature
    *_, space = semicircle
    for seed in range(3):
        u = _random_nodal(space, seed)
        a = space.seminorm_matrix_form(u, broken)
        b = space.seminorm_pointwise(u, broken)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


def test_penalty_matrix_matches_nodal_form(channel):
    *_, space = channel
    a = np.random.default_rng(3).standard_normal(space.dim)
    u = space.nodal(a)
    assert np.isclose(a @ space.penalty_matrix @ a, space.seminorm_pointwise(u), rtol=1e-9)


def test_affine_fields_are_in_the_nullspace(channel):
    *_, space = channel
    rng = np.random.default_rng(7)
    x = space.scalar.coords
    for _ in range(20):
        A = rng.standard_normal((2, 2))
        b = rng.standard_normal(2)
        u = b + x @ A.T
        assert space.seminorm_pointwise(u) <= 1e-10 * np.sum(A * A)
        # the assembled route cancels entries of size |M| and is round-off limited
        scale = abs(space.parts.seminorm).max() * np.sum(u * u)
        assert abs(space.seminorm_matrix_form(u)) <= 1e-13 * scale


@pytest.mark.parametrize("degree", [2, 3, 4, 5, 6])
def test_gradient_jumps_vanish_for_global_polynomials(degree):
    pm, _ = linearize(semicircle_mesh(max(degree, 2)), angle_tol=1e-2)
    space = build_displacement_space(pm, degree)
    x = space.scalar.coords
    rng = np.random.default_rng(degree)
    for total in range(degree + 1):
        c = rng.standard_normal((total + 1, 2))
        u = sum(c[i] * (x[:, 0] ** i * x[:, 1] ** (total - i))[:, None] for i in range(total + 1))
        assert space.facet_jump_energy(u) < 1e-10


def test_coefficient_roundtrip_through_adjoint(channel):
    *_, space = channel
    rng = np.random.default_rng(11)
    a = rng.standard_normal(space.dim)
    g = rng.standard_normal((space.n_nodes, 2))
    # <nodal(a), g> == <a, nodal_adjoint(g)>
    assert np.isclose(np.sum(space.nodal(a) * g), a @ space.nodal_adjoint(g), rtol=1e-12)


def test_identity_at_zero_coefficients(semicircle):
    _, pm, _, space = semicircle
    pts = pm.vertices
    y, J = space.eval_np(np.zeros(space.dim), pts)
    assert np.array_equal(y, pts)
    assert np.allclose(J, np.eye(2))


def test_fix_all_vertices_and_free_edges():
    pm, _ = linearize(bump_channel_mesh(3, nx=2), angle_tol=1e-2)
    top = [int(e) for e in pm.boundary_edge_ids if np.all(pm.vertices[pm.edges[e], 1] > 0.9)]
    sp = DisplacementSpace(pm, 3, free_edges=top, fix_all_vertices=True)
    U = sp.basis_nodal()
    nv = pm.tri.vertices.shape[0]
    assert np.all(U[:, :nv, :] == 0.0)
    # interior nodes of the free edges move in both directions
    inner = sp.scalar.edge_dofs[top[0]][1:-1]
    assert np.linalg.matrix_rank(U[:, inner[0], :]) == 2


def _square_with_periodic_sides(n, shift=0.0):
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([gx.ravel(), gy.ravel()])
    # optionally perturb the right side so that it is no longer a translate
    right = np.isclose(verts[:, 0], 1.0) & (verts[:, 1] > 0) & (verts[:, 1] < 1)
    verts[right, 1] += shift
    tris = structured_triangles(n, n)
    facets, left_ids, right_ids = [], [], []
    for e, t in enumerate(tris):
        for f in range(3):
            p, q = verts[t[f]], verts[t[(f + 1) % 3]]
            if np.isclose(p[1], q[1]) and np.isclose(p[1], 0.0) or np.isclose(p[1], 1.0) and np.isclose(q[1], 1.0):
                facets.append(BoundaryFacet(e, f, "wall"))
            for side, bucket in ((0.0, left_ids), (1.0, right_ids)):
                if np.isclose(p[0], side) and np.isclose(q[0], side):
                    bucket.append((min(p[1], q[1]), len(facets)))
                    facets.append(BoundaryFacet(e, f, "side"))
    left_ids.sort()
    right_ids.sort()
    pairs = [(a[1], b[1]) for a, b in zip(left_ids, right_ids)]
    return CurvedMesh.from_linear(verts, tris, 1, facets, pairs)


def test_periodic_edges_tie_displacements():
    pm, _ = linearize(_square_with_periodic_sides(3))
    sp = build_displacement_space(pm, 3)
    U = sp.basis_nodal()
    for e1, e2 in pm.periodic_edges:
        n1, n2 = sp.scalar.edge_dofs[e1], sp.scalar.edge_dofs[e2]
        x1, x2 = sp.scalar.coords[n1], sp.scalar.coords[n2]
        for j, node in enumerate(n2):
            m = np.argmin(np.hypot(*(x1 - (x2[j] - [1.0, 0.0])).T))
            assert np.array_equal(U[:, node, :], U[:, n1[m], :])


def test_non_translated_periodic_edges_raise():
    with pytest.raises(InconsistentPeriodicity):
        pm, _ = linearize(_square_with_periodic_sides(3, shift=0.05))
        build_displacement_space(pm, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_seminorm_is_quadratic(seed, scale):
    pm, _ = linearize(semicircle_mesh(3), angle_tol=1e-2)
    space = _cached_space(pm)
    u = np.random.default_rng(seed).standard_normal((space.n_nodes, 2))
    assert np.isclose(space.seminorm_matrix_form(scale * u), scale**2 * space.seminorm_matrix_form(u), rtol=1e-10)


_CACHE = {}


def _cached_space(pm):
    if "s" not in _CACHE:
        _CACHE["s"] = build_displacement_space(pm, 3)
    return _CACHE["s"]
