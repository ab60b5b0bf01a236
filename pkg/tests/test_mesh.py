import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_polytope_points
from regmap.errors import InadmissibleMesh, OutsideDomain, PointNotOnBoundary
from regmap.mesh import (
    CurvedMesh,
    TriMesh,
    check_hypothesis,
    constant_C,
    dedup_points,
    deformed_quality,
    linearize,
    mesh_quality,
)
from regmap.synthetic import (
    bump_channel_mesh,
    rectangle_mesh,
    semicircle_mesh,
    two_point_profile_mesh,
)


def test_dedup_first_occurrence_order():
    pts = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1e-14], [0.0, 1.0], [0.0, 0.0]])
    uniq, inv = dedup_points(pts, 1e-10)
    assert np.allclose(uniq, [[1, 0], [0, 0], [0, 1]])
    assert inv.tolist() == [0, 1, 0, 2, 1]


def test_locate_ties_go_to_lowest_element():
    m = rectangle_mesh(2, 2)
    # the shared vertex (0.5, 0.5) belongs to several elements
    elem, lam, found = m.locate(np.array([[0.5, 0.5]]))
    owners = np.flatnonzero((m.triangles == 4).any(axis=1))
    assert found[0] and elem[0] == owners.min()
    assert np.allclose(lam.sum(axis=1), 1.0)


def test_locate_outside_raises_unless_clamped():
    m = rectangle_mesh(3, 3)
    with pytest.raises(OutsideDomain):
        m.locate(np.array([[1.5, 0.5]]))
    _, _, found = m.locate(np.array([[1.5, 0.5]]), clamp=True)
    assert not found[0]


def test_p1_interpolation_is_exact_for_affine_fields():
    m = rectangle_mesh(5, 4)
    f = lambda p: 2.0 - 3.0 * p[:, 0] + 0.5 * p[:, 1]  # noqa: E731
    pts = np.random.default_rng(0).uniform(0, 1, (100, 2))
    vals, grads, n_cl = m.interpolate(f(m.vertices), pts)
    assert n_cl == 0
    assert np.max(np.abs(vals - f(pts))) < 1e-13
    assert np.allclose(grads, [-3.0, 0.5])


def test_semicircle_vertices_and_polytope():
    cm = semicircle_mesh(4)
    pm, gm = linearize(cm)
    assert np.allclose(pm.vertices[:5], [[-1, 0], [0, 0], [0, 0.45], [1, 0], [0, 1]])
    # V: the two base corners and the top of the arc
    assert set(pm.polytope_vertices.tolist()) == {0, 3, 4}
    rep = check_hypothesis(gm)
    assert rep.ok
    assert rep.vertex_error == 0.0


def test_geometric_map_inverse_roundtrip(semicircle, channel):
    for _, pm, gm, _ in (semicircle, channel):
        x = random_polytope_points(pm, 400)
        y = gm(x)
        assert np.max(np.abs(gm.inverse(y) - x)) < 1e-11


def test_vertices_are_fixed_exactly(channel):
    _, pm, gm, _ = channel
    assert np.array_equal(gm(pm.vertices), pm.vertices)
    assert np.array_equal(gm.inverse(pm.vertices), pm.vertices)


def test_boundary_maps_to_curve(channel):
    _, pm, gm, _ = channel
    # top edge of the polytope goes onto the degree-6 interpolant of the bump
    # wall; its distance to the exact sine is bounded by the interpolation error
    t = np.linspace(0, 1, 50)
    pts = np.column_stack([2.0 * t, np.ones_like(t)])
    y = gm(pts)
    assert np.max(np.abs(y[:, 1] - (1.0 + 0.2 * np.sin(np.pi * y[:, 0] / 2.0)))) < 2e-5
    assert np.all(np.diff(y[:, 0]) > 0)


def test_coarse_profile_mesh_is_rejected():
    with pytest.raises(InadmissibleMesh, match="collapses"):
        linearize(two_point_profile_mesh())


def test_inverted_element_is_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(InadmissibleMesh):
        linearize(CurvedMesh.from_linear(verts, np.array([[0, 2, 1]]), 2))


def test_nonmanifold_edge_is_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0], [0.5, 0.5]])
    tris = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(InadmissibleMesh):
        linearize(CurvedMesh.from_linear(verts, tris, 1))


def test_nonfinite_nodes_are_rejected():
    nodes = np.zeros((1, 3, 2))
    nodes[0, 1, 0] = np.nan
    with pytest.raises(InadmissibleMesh):
        CurvedMesh(1, nodes)


def test_mesh_json_roundtrip():
    cm = bump_channel_mesh(3)
    back = CurvedMesh.from_json(cm.to_json())
    assert np.array_equal(back.nodes, cm.nodes)
    assert back.boundary_facets == cm.boundary_facets


def test_arc_midpoint_is_angular_only_at_tight_tolerance():
    # the degree-4 arc interpolant has a small tangent jump at the top vertex
    cm = semicircle_mesh(4)
    pm, _ = linearize(cm, angle_tol=1e-6)
    assert 4 in pm.angular_vertices.tolist()
    pm2, _ = linearize(cm, angle_tol=1e-2)
    assert 4 not in pm2.angular_vertices.tolist()
    assert pm2.fictitious_vertices.tolist() == [4]


def test_boundary_geodesic_on_arc():
    _, gm = linearize(semicircle_mesh(8), angle_tol=1e-2)
    geo = gm.geometry
    a = np.array([math.cos(0.3), math.sin(0.3)])
    b = np.array([math.cos(0.3 + math.pi / 3), math.sin(0.3 + math.pi / 3)])
    assert abs(geo.geodesic(a, b) - math.pi / 3) < 1e-5
    # paths from the arc to the base cross a corner
    assert geo.geodesic(a, np.array([0.5, 0.0])) == math.inf
    assert abs(geo.geodesic(np.array([-0.5, 0.0]), np.array([0.5, 0.0])) - 1.0) < 1e-12
    with pytest.raises(PointNotOnBoundary):
        geo.arc_position(np.array([[0.0, 0.5]]))


def test_constant_C_for_identical_polytopes_is_zero():
    _, gm = linearize(semicircle_mesh(4), angle_tol=1e-2)
    assert constant_C(gm, gm) == 0.0


def test_mesh_quality_special_value():
    q, det, bad = mesh_quality(np.diag([2.0, 0.5])[None])
    assert abs(q[0] - 289.0 / 64.0) < 1e-12
    assert not bad[0]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    st.floats(0, 2 * math.pi),
    st.floats(0.1, 10.0),
)
def test_mesh_quality_ratio_invariance(entries, angle, scale):
    g = np.array(entries).reshape(2, 2) + 3.0 * np.eye(2)
    if np.linalg.det(g) <= 0.1:
        return
    r = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    q0 = mesh_quality(g[None])[0][0]
    q1 = mesh_quality((scale * r @ g)[None])[0][0]
    q2 = mesh_quality((g @ r)[None])[0][0]
    assert abs(q1 / q0 - 1.0) < 1e-12
    assert abs(q2 / q0 - 1.0) < 1e-12


def test_mesh_quality_flags_inverted():
    q, _, bad = mesh_quality(np.diag([1.0, -1.0])[None])
    assert bad[0] and q[0] > 1e10


def test_deformed_quality_of_identity_is_one():
    cm = bump_channel_mesh(2, nx=2)
    rep = deformed_quality(cm, cm.nodes)
    assert np.allclose(rep.ratio, 1.0)
    assert rep.min_det > 0


def test_trimesh_rejects_bad_input():
    with pytest.raises((ValueError, InadmissibleMesh)):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
