"""Parametric registration: single solves, coefficient POD, the greedy
template loop and regression of the coefficients over the parameter domain."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.interpolate import RBFInterpolator

from .errors import RegmapError
from .mesh import GeometricMap
from .objective import (
    CompositeObjective,
    DistributedTarget,
    PenaltyConfig,
    Sensor,
    TemplateSpace,
    build_penalties,
)
from .optimize import lbfgs
from .space import DisplacementSpace

log = logging.getLogger(__name__)

__all__ = [
    "CompositionalMap",
    "MultiLayerMap",
    "RegistrationProblem",
    "SingleResult",
    "solve_single",
    "PODResult",
    "pod",
    "order_parameters",
    "GreedyConfig",
    "GreedyState",
    "greedy",
    "register_new",
    "RegressorModel",
    "rbf_fit",
    "rbf_predict",
    "parametric_map",
]


class CompositionalMap:
    """``Phi = Psi o N_p(a) o Psi^{-1}`` for a full coefficient vector ``a``."""

    def __init__(self, space: DisplacementSpace, gm: GeometricMap, a):
        self.space = space
        self.gm = gm
        self.a = np.asarray(a, dtype=float)
        self._nodal = space.nodal(self.a)

    def _disp(self, z, clamp=True):
        elem, lam, found = self.space.pm.tri.locate(z, clamp=clamp)
        from .space import PointTable

        t = PointTable(self.space.scalar, elem, lam[:, 1:])
        u = self._nodal
        d = np.column_stack([t.E @ u[:, 0], t.E @ u[:, 1]])
        g = np.empty((len(z), 2, 2))
        g[:, 0, 0] = t.Gx @ u[:, 0]
        g[:, 0, 1] = t.Gy @ u[:, 0]
        g[:, 1, 0] = t.Gx @ u[:, 1]
        g[:, 1, 1] = t.Gy @ u[:, 1]
        return d, g

    def polytope_map(self, z):
        """``N_p(a)`` and its Jacobian at points of the polytope."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        d, g = self._disp(z)
        return z + d, g + np.eye(2)

    def __call__(self, x, clamp: bool = True):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = self.gm.inverse(x, clamp=clamp)
        w, _ = self.polytope_map(z)
        return self.gm.evaluate(w, clamp=True)[0]

    def jacobian_det(self, z):
        """``det grad Phi`` at ``Psi(z)`` for polytope points ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        w, gn = self.polytope_map(z)
        _, g0 = self.gm.evaluate(z, clamp=True)
        _, g1 = self.gm.evaluate(w, clamp=True)
        return np.linalg.det(g1) * np.linalg.det(gn) / np.linalg.det(g0)

    def inverse(self, y, tol: float = 1e-12, max_iter: int = 50):
        """``Phi^{-1}`` through Newton iterations on ``N_p``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        w = self.gm.inverse(y, clamp=True)
        z = w.copy()
        scale = self.gm.diameter
        for _ in range(max_iter):
            zn, g = self.polytope_map(z)
            r = zn - w
            if np.max(np.abs(r)) <= tol * scale:
                break
            z = z - np.linalg.solve(g, r[..., None])[..., 0]
        return self.gm.evaluate(z, clamp=True)[0]


class MultiLayerMap:
    """Composition ``Phi_L o ... o Phi_1`` of compositional maps (evaluation only)."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x):
        y = np.atleast_2d(np.asarray(x, dtype=float))
        for layer in self.layers:
            y = layer(y)
        return y

    def jacobian_det(self, x, h: float = 1e-6):
        """Central-difference Jacobian determinant (layers are only Lipschitz
        across element faces, so this is meant for sampling interior points)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        for e in np.eye(2):
            cols.append((self(x + h * e) - self(x - h * e)) / (2 * h))
        g = np.stack(cols, axis=-1)
        return np.linalg.det(g)


@dataclass
class RegistrationProblem:
    """Immutable data shared by all registration solves."""

    space: DisplacementSpace
    gm: GeometricMap
    cfg: PenaltyConfig
    pb_mesh: object = None
    opt: dict = field(default_factory=dict)

    def __post_init__(self):
        self.penalties = build_penalties(self.space, self.gm, self.pb_mesh, self.cfg)
        self.weights = DistributedTarget.quadrature_weights(self.space, self.gm)

    def sensor_values(self, sensor: Sensor, a=None) -> np.ndarray:
        """Sensor composed with ``N_p(a)`` at the polytope quadrature points."""
        pts = self.space.quadrature_points
        if a is not None and np.any(a):
            d, _ = self.space.displacement(a, self.space.quadrature_table, with_gradient=False)
            pts = pts + d
        return sensor(pts)[0]

    def template_space(self, values) -> TemplateSpace:
        return TemplateSpace(np.column_stack(values), self.weights)

    def distributed(self, sensor: Sensor, templates: TemplateSpace) -> DistributedTarget:
        return DistributedTarget(self.space, self.gm, sensor, templates)

    def objective(self, targets, W=None) -> CompositeObjective:
        return CompositeObjective(list(targets), self.penalties, self.cfg, W)


@dataclass
class SingleResult:
    a: np.ndarray
    f_target: float
    f_objective: float
    status: str
    n_iter: int
    history: list
    flags: list = field(default_factory=list)


def solve_single(problem: RegistrationProblem, targets, W=None, a0=None, **opt) -> SingleResult:
    """Minimise target plus penalties over reduced coefficients ``b``, ``a = W b``.

    Returns the target value (without penalties) at the optimum.
    """
    obj = problem.objective(targets, W)
    m = problem.space.dim if W is None else W.shape[1]
    b0 = np.zeros(m) if a0 is None else np.asarray(a0, dtype=float)
    kwargs = {**problem.opt, **opt}
    res = lbfgs(obj.value_grad, b0, **kwargs)
    flags = []
    if res.status == "line_search":
        flags.append("line_search")
    if res.status == "max_iter":
        flags.append("max_iter")
    f_tg = obj.target_value(res.x)
    return SingleResult(res.x, f_tg, res.f, res.status, res.n_iter, res.history, flags)


@dataclass
class PODResult:
    W: np.ndarray
    projected: np.ndarray
    eigenvalues: np.ndarray
    m: int
    flags: list = field(default_factory=list)


def pod(snapshots, tol_pod: float) -> PODResult:
    """POD of coefficient snapshots (rows) by the method of snapshots.

    ``m`` is the smallest count whose eigenvalue sum reaches ``1 - tol_pod``
    of the total.  Modes are re-orthonormalised by QR with a sign convention
    making the largest entry of each mode positive.
    """
    A = np.atleast_2d(np.asarray(snapshots, dtype=float)).T  # (M, n)
    M = A.shape[0]
    C = A.T @ A
    lam, V = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    V = V[:, order]
    total = lam.sum()
    flags = []
    if total <= 0.0:
        W = np.zeros((M, 1))
        W[0, 0] = 1.0
        flags.append("zero_snapshots")
        return PODResult(W, (W.T @ A).T, lam, 1, flags)
    cum = np.cumsum(lam)
    m = int(np.searchsorted(cum, (1.0 - tol_pod) * total - 1e-15 * total) + 1)
    m = min(m, int(np.sum(lam > 1e-14 * lam[0])) or 1)
    modes = A @ V[:, :m] / np.sqrt(lam[:m])
    Q, R = np.linalg.qr(modes)
    Q = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    idx = np.argmax(np.abs(Q), axis=0)
    Q = Q * np.sign(Q[idx, np.arange(m)])
    return PODResult(Q, (Q.T @ A).T, lam, m, flags)


def order_parameters(params, mu_star):
    """Nearest-next ordering of training parameters.

    The first parameter is the one closest to ``mu_star``; each next one is
    the remaining parameter closest to the already ordered set.  Each
    parameter after the first is initialised from its nearest predecessor.
    Ties go to the lowest parameter index.

    Returns
    -------
    order : list of int
    neighbor : list of int
        For each position, the parameter index used for initialisation
        (``-1`` for the first).
    """
    P = np.atleast_2d(np.asarray(params, dtype=float))
    if P.shape[0] == 1 and np.ndim(params) == 1:
        P = P.T
    n = P.shape[0]
    mu_star = np.atleast_1d(np.asarray(mu_star, dtype=float))
    d0 = np.linalg.norm(P - mu_star, axis=1)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(P))))
    first = int(np.flatnonzero(d0 <= d0.min() + tol)[0])
    order = [first]
    neighbor = [-1]
    dist = np.linalg.norm(P - P[first], axis=1)
    near = np.full(n, first)
    done = np.zeros(n, dtype=bool)
    done[first] = True
    for _ in range(1, n):
        cand = np.where(done, np.inf, dist)
        k = int(np.flatnonzero(cand <= cand.min() + tol)[0])
        order.append(k)
        neighbor.append(int(near[k]))
        done[k] = True
        dk = np.linalg.norm(P - P[k], axis=1)
        closer = dk < dist - tol
        near[closer] = k
        dist = np.minimum(dist, dk)
    return order, neighbor


@dataclass
class GreedyConfig:
    n_max: int = 6
    tol: float = 1e-4
    tol_pod: float = 5e-3
    c_inf: float = 10.0
    threads: int = 1


@dataclass
class GreedyState:
    params: np.ndarray
    xi: list
    templates: list
    W: np.ndarray
    a_star: np.ndarray
    coefficients: np.ndarray
    f_star: np.ndarray
    f_zero: np.ndarray
    box: list
    history: list
    flags: dict

    @property
    def n(self) -> int:
        return len(self.templates)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "xi": [np.atleast_1d(x).tolist() for x in self.xi],
            "W": self.W.tolist(),
            "m": int(self.W.shape[1]),
            "params": self.params.tolist(),
            "coefficients": self.coefficients.tolist(),
            "f_star": self.f_star.tolist(),
            "f_zero": self.f_zero.tolist(),
            "box": self.box,
            "history": self.history,
            "flags": {str(k): v for k, v in self.flags.items()},
        }


def greedy(problem: RegistrationProblem, params, sensor_fn, mu_bar=None, cfg: GreedyConfig | None = None) -> GreedyState:
    """Greedy construction of the template space with registration over the
    training set.

    Parameters
    ----------
    params : array (n_train, P) or (n_train,)
    sensor_fn : callable
        ``sensor_fn(mu) -> Sensor``.
    mu_bar : array, optional
        Parameter of the initial template; defaults to the centroid of ``params``.
    """
    cfg = cfg or GreedyConfig()
    P = np.asarray(params, dtype=float)
    P2 = P.reshape(len(P), -1)
    n_train = P2.shape[0]
    mu_bar = P2.mean(axis=0) if mu_bar is None else np.atleast_1d(np.asarray(mu_bar, dtype=float))
    sensors = [sensor_fn(P[i]) for i in range(n_train)]
    M = problem.space.dim
    W = np.eye(M)
    bar_sensor = sensor_fn(mu_bar if P.ndim > 1 else float(mu_bar[0]))
    xi = [("bar", mu_bar)]
    tmpl_vals = [problem.sensor_values(bar_sensor)]
    templates = problem.template_space(tmpl_vals)
    flags: dict = {i: [] for i in range(n_train)}
    history = []
    order, neighbor = order_parameters(P2, mu_bar)
    a_full = np.zeros((n_train, M))
    a_proj = None
    f_star = np.zeros(n_train)
    f_zero = np.array([problem.distributed(s, templates).value_grad(np.zeros(M))[0] for s in sensors])
    box = []
    enriched = set()

    def run(i, b0, W_, templates_):
        try:
            r = solve_single(problem, [(problem.distributed(sensors[i], templates_), 1.0)], W_, b0)
            return i, r, None
        except RegmapError as exc:
            return i, None, exc

    for it in range(1, cfg.n_max):
        if it == 1:
            results = {}
            for pos, i in enumerate(order):
                b0 = np.zeros(W.shape[1]) if pos == 0 else W.T @ a_full[neighbor[pos]]
                _, r, exc = run(i, b0, W, templates)
                results[i] = (r, exc, b0)
                if r is not None:
                    a_full[i] = W @ r.a
        else:
            b0s = {i: a_proj[i] for i in range(n_train)}
            if cfg.threads > 1:
                with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                    outs = list(ex.map(lambda i: run(i, b0s[i], W, templates), range(n_train)))
            else:
                outs = [run(i, b0s[i], W, templates) for i in range(n_train)]
            results = {i: (r, exc, b0s[i]) for i, r, exc in outs}
        for i in range(n_train):
            r, exc, b0 = results[i]
            if r is None:
                flags[i].append(f"iter{it}:{type(exc).__name__}")
                f_star[i] = np.inf
                a_full[i] = W @ b0
                continue
            a_full[i] = W @ r.a
            f_star[i] = r.f_target
            flags[i] += [f"iter{it}:{f}" for f in r.flags]
        if it == 1:
            box = _box_diagnostics(P2, order, neighbor, a_full, mu_bar, cfg.c_inf)
        pr = pod(a_full, cfg.tol_pod)
        W = pr.W
        a_proj = pr.projected
        fmax = float(np.max(f_star))
        history.append({"iteration": it, "n": len(tmpl_vals), "m": pr.m, "max_f": fmax,
                        "argmax": int(np.argmax(f_star))})
        log.info("greedy iteration %d: n=%d m=%d max f*=%.3e", it, len(tmpl_vals), pr.m, fmax)
        if fmax < cfg.tol or it == cfg.n_max - 1:
            break
        cand = np.where(np.isin(np.arange(n_train), list(enriched)), -np.inf, f_star)
        new = int(np.argmax(cand))
        enriched.add(new)
        xi.append(("train", new))
        tmpl_vals = []
        for kind, ref in xi:
            if kind == "bar":
                tmpl_vals.append(problem.sensor_values(bar_sensor))
            else:
                tmpl_vals.append(problem.sensor_values(sensors[ref], W @ a_proj[ref]))
        templates = problem.template_space(tmpl_vals)

    return GreedyState(
        params=P,
        xi=[ref if kind == "bar" else P[ref] for kind, ref in xi],
        templates=tmpl_vals,
        W=W,
        a_star=a_full,
        coefficients=a_proj,
        f_star=f_star,
        f_zero=f_zero,
        box=box,
        history=history,
        flags=flags,
    )


def register_new(problem: RegistrationProblem, state: GreedyState, params, sensor_fn, model=None):
    """Register parameters outside the training set with the final templates
    and reduced basis.

    Initial coefficients come from ``model`` when given, else zero.  Returns
    the optimal target values and the reduced coefficients.
    """
    P = np.asarray(params, dtype=float)
    templates = problem.template_space(state.templates)
    m = state.W.shape[1]
    f = np.empty(len(P))
    b = np.empty((len(P), m))
    for i, mu in enumerate(P):
        b0 = rbf_predict(model, mu) if model is not None else np.zeros(m)
        r = solve_single(problem, [(problem.distributed(sensor_fn(mu), templates), 1.0)], state.W, b0)
        f[i] = r.f_target
        b[i] = r.a
    return f, b


def _box_diagnostics(P, order, neighbor, a_full, mu_bar, c_inf):
    out = []
    for pos, i in enumerate(order):
        if pos == 0:
            ref_mu = mu_bar
            a0 = np.zeros(a_full.shape[1])
        else:
            j = neighbor[pos]
            ref_mu = P[j]
            a0 = a_full[j]
        rhs = c_inf * float(np.linalg.norm(P[i] - ref_mu))
        lhs = float(np.max(np.abs(a_full[i] - a0), initial=0.0))
        applicable = rhs > 0.0
        out.append({"index": int(i), "neighbor": int(neighbor[pos]), "lhs": lhs, "rhs": rhs,
                    "applicable": applicable, "satisfied": bool(lhs <= rhs) if applicable else None})
    return out


# -- regression ---------------------------------------------------------------------

@dataclass
class RegressorModel:
    interpolator: object
    retained: np.ndarray
    r2: np.ndarray
    mean: np.ndarray
    learn: np.ndarray
    test: np.ndarray
    seed: int
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "retained": self.retained.tolist(),
            "r2": [None if not np.isfinite(v) else float(v) for v in self.r2],
            "mean": self.mean.tolist(),
            "learn": self.learn.tolist(),
            "test": self.test.tolist(),
            "seed": self.seed,
            "flags": self.flags,
        }


def _fit_rbf(sites, values, kernel, flags):
    try:
        return RBFInterpolator(sites, values, kernel=kernel)
    except (np.linalg.LinAlgError, ValueError):
        flags.append("degenerate_kernel")
        return RBFInterpolator(sites, values, kernel=kernel, smoothing=1e-10)


def rbf_fit(params, values, r_min: float = 0.70, split: float = 0.8, seed: int = 0,
            kernel: str = "thin_plate_spline") -> RegressorModel:
    """Fit an RBF interpolant on a seeded learning split and keep the modes
    whose out-of-sample R^2 reaches ``r_min``."""
    X = np.asarray(params, dtype=float).reshape(len(params), -1)
    Y = np.asarray(values, dtype=float).reshape(len(values), -1)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if not 0.0 < split <= 1.0:
        raise ValueError("split must lie in (0, 1]")
    n_learn = n if split >= 1.0 or n == 1 else max(1, min(n - 1, int(round(split * n))))
    learn, test = np.sort(perm[:n_learn]), np.sort(perm[n_learn:])
    flags: list = []
    interp = _fit_rbf(X[learn], Y[learn], kernel, flags)
    mean = Y[learn].mean(axis=0)
    if test.size:
        pred = interp(X[test])
        res = np.sum((Y[test] - pred) ** 2, axis=0)
        var = np.sum((Y[test] - mean) ** 2, axis=0)
        # constant test data: R^2 is 1 if the fit reproduces it up to round-off
        tiny = 1e-24 * test.size * np.maximum(1.0, mean**2)
        flat = var <= tiny
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(flat, np.where(res <= tiny, 1.0, -np.inf), 1.0 - res / np.where(flat, 1.0, var))
    else:
        r2 = np.ones(Y.shape[1])
        flags.append("no_test_split")
    return RegressorModel(interp, r2 >= r_min, r2, mean, learn, test, seed, flags)


def rbf_predict(model: RegressorModel, mu) -> np.ndarray:
    X = np.atleast_1d(np.asarray(mu, dtype=float))
    single = X.ndim == 1 and model.interpolator.y.shape[1] == X.size
    X = X.reshape(1, -1) if single else X.reshape(len(X), -1)
    pred = model.interpolator(X)
    pred = np.where(model.retained[None, :], pred, model.mean[None, :])
    return pred[0] if single else pred


def parametric_map(model: RegressorModel, W: np.ndarray, space: DisplacementSpace, gm: GeometricMap, mu):
    """Map handle ``N(W a_hat(mu))``."""
    return CompositionalMap(space, gm, W @ rbf_predict(model, mu))

