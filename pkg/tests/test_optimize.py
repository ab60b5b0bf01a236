import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from regmap.errors import Infeasible
from regmap.optimize import augmented_lagrangian, lbfgs


def test_lbfgs_rosenbrock():
    res = lbfgs(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0, -0.5, 0.8]), gtol=1e-9, max_iter=2000)
    assert res.converged
    assert np.allclose(res.x, 1.0, atol=1e-6)


def test_lbfgs_quadratic_is_exact_in_few_steps():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((8, 8))
    A = q @ q.T + 8 * np.eye(8)
    b = rng.standard_normal(8)
    res = lbfgs(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(8), gtol=1e-12)
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-10)
    assert res.n_iter < 40


def test_lbfgs_treats_nonfinite_trial_as_rejected():
    # log barrier: steps into x <= 0 must be backtracked
    def f(x):
        if x[0] <= 0:
            return np.inf, np.array([np.nan])
        return x[0] - np.log(x[0]), np.array([1.0 - 1.0 / x[0]])

    res = lbfgs(f, np.array([5.0]), gtol=1e-10)
    assert abs(res.x[0] - 1.0) < 1e-8


def test_augmented_lagrangian_box_qp():
    # min |x - c|^2 subject to |x_i| <= 0.5 has the clipped solution
    c = np.array([2.0, -0.1, -3.0])

    def fun(x):
        return float((x - c) @ (x - c)), 2.0 * (x - c)

    def cons(x):
        return np.concatenate([x - 0.5, -x - 0.5]), np.vstack([np.eye(3), -np.eye(3)])

    res = augmented_lagrangian(fun, cons, np.zeros(3), tol=1e-8, inner_kwargs={"gtol": 1e-12})
    assert res.violation <= 1e-8
    assert np.allclose(res.x, [0.5, -0.1, -0.5], atol=1e-7)
    # multipliers of active bounds match the KKT values 2 |c_i - 0.5|
    assert np.isclose(res.multipliers[0], 3.0, rtol=1e-5)
    assert np.isclose(res.multipliers[5], 5.0, rtol=1e-5)


def test_augmented_lagrangian_reports_infeasible():
    def fun(x):
        return float(x @ x), 2.0 * x

    def cons(x):
        # x <= -1 and x >= 1 cannot hold together
        return np.array([x[0] + 1.0, 1.0 - x[0]]), np.array([[1.0], [-1.0]])

    with pytest.raises(Infeasible):
        augmented_lagrangian(fun, cons, np.zeros(1), tol=1e-8, max_outer=5)
    res = augmented_lagrangian(fun, cons, np.zeros(1), tol=1e-8, max_outer=5, raise_infeasible=False)
    assert res.violation > 0.5
