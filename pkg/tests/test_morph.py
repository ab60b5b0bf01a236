import numpy as np
import pytest

from regmap.errors import CurveEdgeMismatch
from regmap.mesh import check_hypothesis, linearize
from regmap.morph import MIN_SAMPLES, MorphProblem, Polyline, sample_boundary, solve_morph
from regmap.synthetic import semicircle_polytope


@pytest.fixture(scope="module")
def fixture():
    mesh, arc, bindings = semicircle_polytope()
    return mesh, [Polyline(arc, "arc")], bindings


def _base_line():
    x = np.linspace(-1.0, 1.0, 200)
    return Polyline(np.column_stack([x, np.zeros_like(x)]), "base")


def test_polyline_needs_dense_samples():
    with pytest.raises(ValueError):
        Polyline(np.random.default_rng(0).uniform(size=(MIN_SAMPLES - 1, 2)))
    with pytest.raises(ValueError):
        Polyline(np.zeros((MIN_SAMPLES, 2)))


def test_polyline_projection_and_length():
    line = _base_line()
    assert line.length == pytest.approx(2.0, abs=1e-14)
    s, d = line.project(np.array([0.25, 0.1]))
    assert s == pytest.approx(1.25, abs=1e-14) and d == pytest.approx(0.1, abs=1e-14)
    assert np.allclose(line(np.array([0.0, 1.0, 2.0])), [[-1, 0], [0, 0], [1, 0]], atol=1e-14)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_sample_count_and_exact_endpoints(fixture, k):
    mesh, curves, bindings = fixture
    pm, _ = linearize(mesh)
    x, y, elem, ref = sample_boundary(pm, curves, bindings, k)
    n_bound = sum(len(v) for v in bindings.values())
    assert x.shape == y.shape == ((k + 1) * n_bound, 2)
    # the first and last pair of every facet coincide with the mesh vertices
    ends = np.r_[0 : len(x) : k + 1, k : len(x) : k + 1]
    assert np.array_equal(x[ends], y[ends])
    assert np.allclose(np.hypot(*y.T), 1.0, atol=1e-6)


def test_straight_curve_gives_equal_pairs_and_identity(fixture):
    mesh, _, _ = fixture
    bindings = {0: [(0, 0), (1, 0)]}
    pm, _ = linearize(mesh)
    x, y, _, _ = sample_boundary(pm, [_base_line()], bindings, 4)
    assert np.max(np.abs(x - y)) < 1e-14
    res = solve_morph(MorphProblem(mesh, [_base_line()], bindings, 4))
    lin = mesh.nodes[:, :3]
    assert np.allclose(res.mesh.nodes[:, :3], lin)
    assert res.max_violation < 1e-14
    assert res.min_jacobian == pytest.approx(1.0, abs=1e-12)


def test_unbound_mesh_is_unchanged(fixture):
    mesh, curves, _ = fixture
    res = solve_morph(MorphProblem(mesh, curves, {}, 3))
    pm, _ = linearize(res.mesh)
    assert np.allclose(pm.vertices, linearize(mesh)[0].vertices)
    assert res.x.shape == (0, 2)


def test_semicircle_morph_meets_contract(fixture):
    mesh, curves, bindings = fixture
    res = solve_morph(MorphProblem(mesh, curves, bindings, 3))
    assert res.max_violation <= 1e-6
    assert res.min_jacobian > 0
    # the solver aims at half the tolerance
    assert res.violations[-1] <= 0.5e-6
    # arc-bound facets carry the curve name
    tags = {(bf.element, bf.local_facet): bf.tag for bf in res.mesh.boundary_facets}
    assert tags[(2, 0)] == tags[(3, 0)] == "arc"
    _, gm = linearize(res.mesh, angle_tol=1e-2)
    assert check_hypothesis(gm).ok


def test_interior_facet_binding_is_rejected(fixture):
    mesh, curves, _ = fixture
    pm, _ = linearize(mesh)
    with pytest.raises(CurveEdgeMismatch, match="not on the boundary"):
        sample_boundary(pm, curves, {0: [(0, 1)]}, 3)


def test_duplicate_and_missing_facets_are_rejected(fixture):
    mesh, curves, _ = fixture
    pm, _ = linearize(mesh)
    with pytest.raises(CurveEdgeMismatch, match="twice"):
        sample_boundary(pm, curves, {0: [(2, 0), (2, 0)]}, 3)
    with pytest.raises(CurveEdgeMismatch, match="does not exist"):
        sample_boundary(pm, curves, {0: [(9, 0)]}, 3)


def test_far_curve_is_rejected(fixture):
    mesh, _, _ = fixture
    th = np.linspace(0.0, np.pi, 200)
    far = Polyline(2.0 * np.column_stack([np.cos(th), np.sin(th)]), "far")
    pm, _ = linearize(mesh)
    with pytest.raises(CurveEdgeMismatch, match="away from curve 'far'"):
        sample_boundary(pm, [far], {0: [(2, 0)]}, 3)
