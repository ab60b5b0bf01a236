import math

import numpy as np
import pytest

from conftest import central_difference
from regmap.errors import NoFeature, NonFiniteObjective
from regmap.objective import (
    EXP_CAP,
    CompositeObjective,
    JacobianPenalty,
    MeshQualityPenalty,
    PenaltyConfig,
    PointSetTarget,
    Sensor,
    SmoothnessPenalty,
    capped_exp,
    detect_shock,
    facet_profile,
    local_maxima,
)
from regmap.registration import RegistrationProblem
from regmap.synthetic import front_field, pushforward_mesh, rectangle_mesh

N_VECTORS = 10


def _directions(space, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    for _ in range(N_VECTORS):
        a = scale * rng.standard_normal(space.dim) / math.sqrt(space.dim)
        d = rng.standard_normal(space.dim)
        yield a, d / np.linalg.norm(d)


def _check_gradient(term, space, seed, h=1e-6, rtol=1e-5):
    def f(a):
        return term.value_grad(a)[0]

    for a, d in _directions(space, seed):
        _, g = term.value_grad(a)
        fd = central_difference(f, a, d, h)
        exact = g @ d
        assert abs(fd - exact) <= rtol * max(abs(exact), 1e-8 * (1.0 + abs(f(a)))), (fd, exact)


@pytest.fixture(scope="module")
def channel_problem(channel):
    cm, pm, gm, space = channel
    pb = pushforward_mesh(gm, rectangle_mesh(8, 4, 0.0, 2.0, 0.0, 1.0))
    problem = RegistrationProblem(space, gm, PenaltyConfig(), pb)
    sens_mesh = rectangle_mesh(200, 100, 0.0, 2.0, 0.0, 1.0)
    sensor = Sensor.from_function(sens_mesh, lambda p: front_field(p, 0.3))
    tmpl = problem.template_space([problem.sensor_values(Sensor.from_function(sens_mesh, lambda p: front_field(p, 0.6)))])
    return problem, sensor, tmpl


def test_jacobian_penalty_gradient(channel):
    *_, space = channel
    _check_gradient(JacobianPenalty(space, PenaltyConfig()), space, 0)


def test_mesh_quality_penalty_gradient(channel_problem):
    problem, *_ = channel_problem
    _check_gradient(problem.penalties["msh"], problem.space, 1)


def test_smoothness_penalty_gradient(channel):
    *_, space = channel
    _check_gradient(SmoothnessPenalty(space), space, 2)


def test_point_target_gradient(channel):
    _, pm, gm, space = channel
    rng = np.random.default_rng(3)
    tmpl = gm(np.column_stack([rng.uniform(0.2, 1.8, 12), rng.uniform(0.2, 0.8, 12)]))
    term = PointSetTarget(space, gm, tmpl, tmpl + 0.05 * rng.standard_normal(tmpl.shape))
    _check_gradient(term, space, 3)


def test_distributed_target_gradient(channel_problem):
    problem, sensor, tmpl = channel_problem
    # P1 sensor: keep the step well inside one sensor element
    _check_gradient(problem.distributed(sensor, tmpl), problem.space, 4, h=1e-7)


def test_composite_gradient_in_reduced_coordinates(channel_problem):
    problem, sensor, tmpl = channel_problem
    rng = np.random.default_rng(5)
    W, _ = np.linalg.qr(rng.standard_normal((problem.space.dim, 4)))
    obj = problem.objective([(problem.distributed(sensor, tmpl), 1.0)], W)
    for _ in range(N_VECTORS):
        b = 0.05 * rng.standard_normal(4)
        d = rng.standard_normal(4)
        _, g = obj.value_grad(b)
        fd = central_difference(lambda x: obj.value_grad(x)[0], b, d, 1e-7)
        assert abs(fd - g @ d) <= 1e-5 * abs(g @ d)


def test_mesh_penalty_at_identity_is_exp_minus_nine(channel_problem):
    problem, *_ = channel_problem
    val, _ = problem.penalties["msh"].value_grad(np.zeros(problem.space.dim))
    assert abs(val - math.exp(-9.0)) < 1e-12


def test_jacobian_penalty_at_identity(channel):
    *_, space = channel
    cfg = PenaltyConfig()
    val, _ = JacobianPenalty(space, cfg).value_grad(np.zeros(space.dim))
    assert abs(val - math.exp((cfg.eps - 1.0) / cfg.c_exp)) < 1e-25


def test_composite_at_zero_uses_xi(channel_problem):
    problem, sensor, tmpl = channel_problem
    obj = problem.objective([(problem.distributed(sensor, tmpl), 1.0)])
    a = np.zeros(problem.space.dim)
    val, _ = obj.value_grad(a)
    tg = obj.target_value(a)
    pen = sum(t.value_grad(a)[0] for t in problem.penalties.values())
    assert np.isclose(val, tg + problem.cfg.xi * pen, rtol=1e-14)
    assert set(obj.last) == {"target", "jac", "msh", "pen"}


def test_capped_exp_is_c1_at_cap():
    t = np.array([EXP_CAP - 1e-9, EXP_CAP, EXP_CAP + 1e-9, EXP_CAP + 5.0])
    val, der, over = capped_exp(t)
    assert over.tolist() == [False, False, True, True]
    assert np.isclose(val[0], val[2], rtol=1e-8)
    assert np.isclose(der[0], der[2], rtol=1e-8)
    assert val[3] == pytest.approx(math.exp(EXP_CAP) * 6.0)
    assert np.all(np.isfinite(capped_exp(np.array([1e6]))[0]))


@pytest.mark.parametrize(
    "kwargs", [{"eps": 0.0}, {"c_exp": 0.2}, {"c_exp": 0.0}, {"kappa_msh": -1.0}, {"xi": -1e-3}]
)
def test_penalty_config_validation(kwargs):
    with pytest.raises(ValueError):
        PenaltyConfig(**kwargs)


def test_inactive_penalties_are_skipped(channel):
    _, _, gm, space = channel
    problem = RegistrationProblem(space, gm, PenaltyConfig(use_jac=False, use_msh=True, use_pen=False), None)
    assert problem.penalties == {}


def test_nonfinite_objective_raises(channel):
    *_, space = channel

    class Bad:
        def value_grad(self, a):
            return math.nan, np.zeros_like(a)

    obj = CompositeObjective([(Bad(), 1.0)], {}, PenaltyConfig())
    with pytest.raises(NonFiniteObjective):
        obj.value_grad(np.zeros(space.dim))


def test_mesh_penalty_flags_inverted_elements(channel_problem):
    problem, *_ = channel_problem
    term: MeshQualityPenalty = problem.penalties["msh"]
    rng = np.random.default_rng(9)
    val, g = term.value_grad(20.0 * rng.standard_normal(problem.space.dim))
    assert term.n_flagged > 0
    assert np.isfinite(val) and np.all(np.isfinite(g))


def test_facet_profile_and_shock_detection():
    s = np.linspace(0.0, 1.0, 5)
    lengths = np.full(6, 0.5)
    # linear samples: mean equals the midpoint value, slope is exact
    profile = np.array([[2.0 - 0.2 * j - 0.1 * t for t in s] for j in range(6)])
    profile[3] -= 1.0
    means, slopes = facet_profile(profile, lengths)
    assert np.allclose(means, profile.mean(axis=1))
    assert np.allclose(slopes, -0.2)
    mids = np.arange(6) + 0.5
    loc, j = detect_shock(means, slopes, lengths, mids, theta=1.0)
    assert j == 2 and loc == 2.5
    with pytest.raises(NoFeature):
        detect_shock(means, np.zeros(6), lengths, mids)


def test_local_maxima():
    assert local_maxima([0, 1, 0, 2, 2, 1, 3, 0]).tolist() == [1, 6]
    assert local_maxima([1, 2]).size == 0
