import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from conftest import random_polytope_points
from regmap.mesh import linearize
from regmap.objective import JacobianPenalty, PenaltyConfig, PointSetTarget, Sensor
from regmap.registration import (
    CompositionalMap,
    GreedyConfig,
    MultiLayerMap,
    RegistrationProblem,
    greedy,
    order_parameters,
    parametric_map,
    pod,
    rbf_fit,
    rbf_predict,
    register_new,
    solve_single,
)
from regmap.space import build_displacement_space
from regmap.synthetic import (
    SEMICIRCLE_A,
    SEMICIRCLE_B,
    front_field,
    pushforward_mesh,
    rectangle_mesh,
    semicircle_mesh,
)


def test_nearest_next_order_on_uniform_grid():
    params = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    order, neighbor = order_parameters(params[:, None], [0.5])
    assert params[order].tolist() == [0.5, 0.25, 0.0, 0.75, 1.0]
    assert neighbor == [-1, 2, 1, 2, 3]


def test_order_is_a_permutation_in_2d():
    P = np.random.default_rng(0).uniform(size=(30, 2))
    order, neighbor = order_parameters(P, P.mean(axis=0))
    assert sorted(order) == list(range(30))
    for pos in range(1, 30):
        assert neighbor[pos] in order[:pos]


def _energy_oracle(A, tol_pod):
    # eigenvalues of the covariance A^T A on the coefficient side
    lam = np.sort(np.linalg.eigvalsh(A.T @ A))[::-1]
    lam = np.clip(lam, 0, None)
    frac = np.cumsum(lam) / lam.sum()
    m = int(np.argmax(frac >= 1 - tol_pod - 1e-15)) + 1
    m = min(m, int(np.sum(lam > 1e-14 * lam[0])))
    _, vecs = np.linalg.eigh(A.T @ A)
    return m, vecs[:, ::-1][:, :m]


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 50), st.integers(3, 200), st.integers(0, 2**31 - 1))
def test_pod_matches_dense_eigendecomposition(n, M, seed):
    rng = np.random.default_rng(seed)
    decay = 0.5 ** np.arange(min(n, M))
    A = (rng.standard_normal((n, min(n, M))) * decay) @ rng.standard_normal((min(n, M), M))
    res = pod(A, 5e-3)
    m, V = _energy_oracle(A, 5e-3)
    assert res.m == m
    assert np.allclose(res.W.T @ res.W, np.eye(m), atol=1e-10)
    # compare subspaces only where the spectrum separates the retained modes
    lam = res.eigenvalues
    if m < len(lam) and lam[m - 1] > 1.01 * lam[m]:
        assert np.max(subspace_angles(res.W, V)) < 1e-8


def test_pod_zero_snapshots():
    res = pod(np.zeros((4, 6)), 5e-3)
    assert res.m == 1 and "zero_snapshots" in res.flags
    assert res.W[:, 0].tolist() == [1, 0, 0, 0, 0, 0]


def test_pod_sign_convention_is_deterministic():
    A = np.random.default_rng(1).standard_normal((5, 9))
    W1, W2 = pod(A, 0.0).W, pod(-A, 0.0).W
    assert np.allclose(W1, W2)
    idx = np.argmax(np.abs(W1), axis=0)
    assert np.all(W1[idx, np.arange(W1.shape[1])] > 0)


def test_rbf_reproduces_training_values():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(20, 2))
    Y = np.column_stack([np.sin(X[:, 0]) + X[:, 1] ** 2, X[:, 0] * X[:, 1]])
    model = rbf_fit(X, Y, split=1.0)
    assert "no_test_split" in model.flags
    assert np.allclose(rbf_predict(model, X), Y, atol=1e-10)
    assert np.allclose(rbf_predict(model, X[3]), Y[3], atol=1e-10)


def test_rbf_filter_and_fallback_to_mean():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(25, 2))
    Y = np.column_stack([np.cos(2 * X[:, 0]) + X[:, 1], rng.standard_normal(25)])
    model = rbf_fit(X, Y, r_min=0.7, split=0.8, seed=0)
    assert model.retained.tolist() == [True, False]
    assert len(model.learn) == 20 and len(model.test) == 5
    p = rbf_predict(model, np.array([0.4, 0.6]))
    assert p[1] == model.mean[1]


def test_rbf_split_is_seeded():
    X = np.linspace(0, 1, 10)[:, None]
    a, b = rbf_fit(X, X, seed=4), rbf_fit(X, X, seed=4)
    assert a.test.tolist() == b.test.tolist()
    with pytest.raises(ValueError):
        rbf_fit(X, X, split=0.0)


def test_rbf_constant_mode_has_unit_r2():
    X = np.random.default_rng(5).uniform(size=(10, 1))
    model = rbf_fit(X, np.ones((10, 1)))
    assert model.r2[0] == 1.0


def test_compositional_map_inverse_and_vertices(channel):
    _, pm, gm, space = channel
    a = 0.02 * np.random.default_rng(6).standard_normal(space.dim)
    phi = CompositionalMap(space, gm, a)
    y = gm(random_polytope_points(pm, 200, seed=1))
    assert np.max(np.abs(phi(phi.inverse(y)) - y)) < 1e-10
    v = pm.vertices[pm.polytope_vertices]
    assert np.array_equal(phi(v), v)


def test_zero_coefficients_give_identity(semicircle):
    _, pm, gm, space = semicircle
    phi = CompositionalMap(space, gm, np.zeros(space.dim))
    y = gm(random_polytope_points(pm, 100))
    assert np.max(np.abs(phi(y) - y)) < 1e-12
    assert np.allclose(phi.jacobian_det(random_polytope_points(pm, 50)), 1.0)


def test_two_layer_map_composes(channel):
    _, pm, gm, space = channel
    rng = np.random.default_rng(7)
    l1 = CompositionalMap(space, gm, 0.01 * rng.standard_normal(space.dim))
    l2 = CompositionalMap(space, gm, 0.01 * rng.standard_normal(space.dim))
    y = gm(random_polytope_points(pm, 20, seed=3))
    assert np.allclose(MultiLayerMap([l1, l2])(y), l2(l1(y)))
    z = random_polytope_points(pm, 20, seed=4)
    assert np.all(MultiLayerMap([l1, l2]).jacobian_det(gm(z)) > 0)


def test_point_target_with_matching_points_gives_zero(semicircle):
    _, _, gm, space = semicircle
    prob = RegistrationProblem(space, gm, PenaltyConfig(xi=0.0))
    pts = np.array([[0.2, 0.3], [-0.4, 0.5]])
    r = solve_single(prob, [(PointSetTarget(space, gm, pts, pts), 1.0)])
    assert r.f_target < 1e-28  # round-off of the geometric inverse
    assert np.all(r.a == 0.0)


def test_point_registration_moves_arc_point():
    # one point slides along the arc from 30 to 53 degrees
    pm, gm = linearize(semicircle_mesh(4))
    space = build_displacement_space(pm, 4)
    prob = RegistrationProblem(space, gm, PenaltyConfig(xi=1e-4))
    term = PointSetTarget(space, gm, SEMICIRCLE_A[None], SEMICIRCLE_B[None])
    r = solve_single(prob, [(term, 1.0)], gtol=1e-9, max_iter=500)
    phi = CompositionalMap(space, gm, r.a)
    assert np.linalg.norm(phi(SEMICIRCLE_A[None])[0] - SEMICIRCLE_B) <= 1e-3
    assert JacobianPenalty(space, prob.cfg).jacobians(r.a).min() > 0
    # the image stays on the curved boundary
    assert gm.boundary_distance(phi(SEMICIRCLE_A[None]))[0] < 1e-10


@pytest.fixture(scope="module")
def small_front(channel):
    _, pm, gm, space = channel
    pb = pushforward_mesh(gm, rectangle_mesh(10, 5, 0.0, 2.0, 0.0, 1.0))
    prob = RegistrationProblem(space, gm, PenaltyConfig(xi=1e-2), pb, {"gtol": 1e-7, "max_iter": 200})
    smesh = rectangle_mesh(80, 40, 0.0, 2.0, 0.0, 1.0)

    def sensor_fn(mu):
        return Sensor.from_function(smesh, lambda p: front_field(p, float(np.atleast_1d(mu)[0])))

    params = np.linspace(0.0, 1.0, 6)[:, None]
    st_ = greedy(prob, params, sensor_fn, params[2], GreedyConfig(n_max=3, tol=1e-6))
    return prob, params, sensor_fn, st_


def test_greedy_reduces_target(small_front):
    _, params, _, st_ = small_front
    assert st_.n <= 3
    assert len(st_.history) <= 2
    assert np.max(st_.f_star) < 0.1 * np.max(st_.f_zero)
    assert st_.a_star.shape == (6, st_.W.shape[0])
    assert np.allclose(st_.W.T @ st_.W, np.eye(st_.W.shape[1]), atol=1e-10)


def test_greedy_box_diagnostics(small_front):
    _, _, _, st_ = small_front
    assert [b["index"] for b in st_.box][0] == 2
    first = st_.box[0]
    assert not first["applicable"] and first["satisfied"] is None
    assert all(b["satisfied"] for b in st_.box[1:])


def test_register_new_matches_training_quality(small_front):
    prob, params, sensor_fn, st_ = small_front
    model = rbf_fit(params, st_.coefficients, split=1.0)
    f, b = register_new(prob, st_, np.array([[0.3], [0.7]]), sensor_fn, model)
    assert np.all(f <= 3 * np.max(st_.f_star) + 1e-12)
    phi = parametric_map(model, st_.W, prob.space, prob.gm, np.array([0.3]))
    assert phi.a.shape == (prob.space.dim,)


def test_greedy_threads_are_deterministic(small_front):
    prob, params, sensor_fn, st_ = small_front
    st2 = greedy(prob, params, sensor_fn, params[2], GreedyConfig(n_max=3, tol=1e-6, threads=3))
    assert np.array_equal(st2.f_star, st_.f_star)
    assert np.array_equal(st2.W, st_.W)
