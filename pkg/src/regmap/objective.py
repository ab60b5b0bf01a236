"""Registration objective: penalties, targets and their gradients.

Every term exposes ``value_grad(a) -> (value, gradient)`` with respect to the
orthonormal-basis coefficients ``a`` of a :class:`~regmap.space.DisplacementSpace`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoFeature, NonFiniteObjective
from .mesh import CurvedMesh, GeometricMap, TriMesh, mesh_quality
from .reference import nodal_basis, simplex_quadrature
from .space import DisplacementSpace, PointTable

__all__ = [
    "PenaltyConfig",
    "capped_exp",
    "JacobianPenalty",
    "MeshQualityPenalty",
    "SmoothnessPenalty",
    "PointSetTarget",
    "Sensor",
    "TemplateSpace",
    "DistributedTarget",
    "CompositeObjective",
    "facet_profile",
    "detect_shock",
    "local_maxima",
]

EXP_CAP = 40.0


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty constants and activation flags."""

    eps: float = 0.1
    c_exp: float = 0.025
    kappa_msh: float = 10.0
    xi: float = 1.0
    use_jac: bool = True
    use_msh: bool = True
    use_pen: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.c_exp < self.eps:
            raise ValueError("c_exp must lie in (0, eps)")
        if not self.kappa_msh > 0:
            raise ValueError("kappa_msh must be positive")
        if not self.xi >= 0:
            raise ValueError("xi must be nonnegative")


def capped_exp(t, cap: float = EXP_CAP):
    """``exp(t)`` continued linearly beyond ``cap``; returns value, derivative
    and a mask of capped entries."""
    t = np.asarray(t, dtype=float)
    over = t > cap
    ec = np.exp(np.minimum(t, cap))
    val = np.where(over, ec * (1.0 + t - cap), ec)
    return val, ec, over


def _moved_chain(space: DisplacementSpace, table: PointTable, gx: np.ndarray) -> np.ndarray:
    """Pull back sensitivities w.r.t. displaced points to coefficient space."""
    g_nodal = np.column_stack([table.E.T @ gx[:, 0], table.E.T @ gx[:, 1]])
    return space.nodal_adjoint(g_nodal)


class JacobianPenalty:
    """Mean exponential barrier on ``det grad N_p(a)`` over the polytope."""

    def __init__(self, space: DisplacementSpace, cfg: PenaltyConfig):
        self.space = space
        self.cfg = cfg
        self.table = space.quadrature_table
        self.weights = space.quadrature_weights
        self.area = float(self.weights.sum())
        self.n_capped = 0

    def jacobians(self, a) -> np.ndarray:
        _, g = self.space.displacement(a, self.table)
        return (1 + g[:, 0, 0]) * (1 + g[:, 1, 1]) - g[:, 0, 1] * g[:, 1, 0]

    def value_grad(self, a):
        cfg = self.cfg
        _, g = self.space.displacement(a, self.table)
        uxx, uxy, uyx, uyy = g[:, 0, 0], g[:, 0, 1], g[:, 1, 0], g[:, 1, 1]
        jac = (1 + uxx) * (1 + uyy) - uxy * uyx
        e, de, over = capped_exp((cfg.eps - jac) / cfg.c_exp)
        self.n_capped = int(over.sum())
        w = self.weights / self.area
        val = float(w @ e)
        c = -w * de / cfg.c_exp  # d value / d J
        t = self.table
        gx = t.Gx.T @ (c * (1 + uyy)) + t.Gy.T @ (-c * uyx)
        gy = t.Gx.T @ (-c * uxy) + t.Gy.T @ (c * (1 + uxx))
        return val, self.space.nodal_adjoint(np.column_stack([gx, gy]))


class MeshQualityPenalty:
    """Exponential penalty on the quality ratio of the deformed mesh.

    The element nodes of ``pb_mesh`` are pulled back once through ``Psi``;
    each evaluation pushes them through ``Psi o N_p(a)``.
    """

    def __init__(self, space: DisplacementSpace, gm: GeometricMap, pb_mesh: CurvedMesh, cfg: PenaltyConfig):
        self.space = space
        self.gm = gm
        self.cfg = cfg
        self.pb = pb_mesh
        coords, e2n = pb_mesh.global_nodes
        self.coords = coords
        self.e2n = e2n
        self.z = gm.inverse(coords, clamp=True)
        elem, lam, _ = space.pm.tri.locate(self.z, clamp=True)
        self.table = PointTable(space.scalar, elem, lam[:, 1:])
        k = pb_mesh.degree
        self.quad = simplex_quadrature(max(2, 2 * k))
        _, self.dl = nodal_basis(k).eval(self.quad.points)
        g_id = np.einsum("enc,qnr->eqcr", pb_mesh.nodes, self.dl)
        self.q_id, det_id, _ = mesh_quality(g_id)
        area_k = np.abs(det_id) @ self.quad.weights
        self.coef = area_k[:, None] * self.quad.weights[None, :] / (0.5 * area_k.sum())
        self.n_capped = 0
        self.n_flagged = 0

    def node_images(self, a):
        d, _ = self.space.displacement(a, self.table, with_gradient=False)
        y, grad = self.gm.evaluate(self.z + d, clamp=True)
        return y, grad

    def value_grad(self, a):
        y, dpsi = self.node_images(a)
        ynodes = y[self.e2n]  # (ne, n_lp, 2)
        g = np.einsum("enc,qnr->eqcr", ynodes, self.dl)
        q, det, bad = mesh_quality(g)
        e, de, over = capped_exp(q / self.q_id - self.cfg.kappa_msh)
        self.n_capped = int(over.sum())
        self.n_flagged = int(bad.any(axis=1).sum())
        val = float(np.sum(self.coef * e))
        # dq/dG on regular entries
        fro = np.einsum("eqij,eqij->eq", g, g)
        safe = np.where(bad, 1.0, det)
        cof = np.empty_like(g)
        cof[..., 0, 0] = g[..., 1, 1]
        cof[..., 0, 1] = -g[..., 1, 0]
        cof[..., 1, 0] = -g[..., 0, 1]
        cof[..., 1, 1] = g[..., 0, 0]
        ratio = fro / safe
        dq = 0.5 * ratio[..., None, None] * (2.0 * g / safe[..., None, None] - ratio[..., None, None] * cof / safe[..., None, None])
        scale = np.where(bad, 0.0, self.coef * de / self.q_id)
        dG = scale[..., None, None] * dq
        dY = np.einsum("eqcr,qnr->enc", dG, self.dl)
        gy = np.zeros_like(y)
        np.add.at(gy, self.e2n.ravel(), dY.reshape(-1, 2))
        gx = np.einsum("pij,pi->pj", dpsi, gy)
        return val, _moved_chain(self.space, self.table, gx)


class SmoothnessPenalty:
    """Quadratic smoothness seminorm ``a^T P a``."""

    def __init__(self, space: DisplacementSpace, broken: bool = False):
        self.matrix = space.broken_matrix if broken else space.penalty_matrix

    def value_grad(self, a):
        a = np.asarray(a, dtype=float)
        pa = self.matrix @ a
        return float(a @ pa), 2.0 * pa


class PointSetTarget:
    """Mean squared mismatch between mapped template points and targets."""

    def __init__(self, space: DisplacementSpace, gm: GeometricMap, template_points, target_points):
        self.space = space
        self.gm = gm
        self.template = np.atleast_2d(np.asarray(template_points, dtype=float))
        self.target = np.atleast_2d(np.asarray(target_points, dtype=float))
        if self.template.shape != self.target.shape:
            raise ValueError("template and target point counts differ")
        self.zbar = gm.inverse(self.template, clamp=True)
        elem, lam, _ = space.pm.tri.locate(self.zbar, clamp=True)
        self.table = PointTable(space.scalar, elem, lam[:, 1:])
        self.n_clamped = 0

    def with_targets(self, target_points) -> "PointSetTarget":
        out = object.__new__(PointSetTarget)
        out.__dict__.update(self.__dict__)
        out.target = np.atleast_2d(np.asarray(target_points, dtype=float))
        return out

    def mapped(self, a):
        d, _ = self.space.displacement(a, self.table, with_gradient=False)
        moved = self.zbar + d
        _, _, found = self.space.pm.tri.locate(moved, clamp=True)
        self.n_clamped = int((~found).sum())
        return self.gm.evaluate(moved, clamp=True)

    def value_grad(self, a):
        y, dpsi = self.mapped(a)
        r = y - self.target
        n = r.shape[0]
        val = float(np.sum(r * r) / n)
        gy = 2.0 * r / n
        gx = np.einsum("pij,pi->pj", dpsi, gy)
        return val, _moved_chain(self.space, self.table, gx)


class Sensor:
    """P1 scalar field on an independent straight mesh of the polytope."""

    def __init__(self, mesh: TriMesh, values):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (mesh.vertices.shape[0],):
            raise ValueError("sensor values must match the mesh vertex count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sensor values must be finite")

    @classmethod
    def from_function(cls, mesh: TriMesh, func):
        return cls(mesh, func(mesh.vertices))

    def __call__(self, points):
        """Values, gradients and the number of clamped points."""
        return self.mesh.interpolate(self.values, points, clamp=True)


class TemplateSpace:
    """Template fields stored as values at the polytope quadrature points."""

    def __init__(self, values: np.ndarray, weights: np.ndarray, rcond: float = 1e-12):
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        self.values = v
        self.weights = np.asarray(weights, dtype=float)
        sw = np.sqrt(self.weights)
        u, s, _ = np.linalg.svd(sw[:, None] * v, full_matrices=False)
        keep = s > rcond * (s[0] if s.size and s[0] > 0 else 1.0)
        self.orth = u[:, keep]
        self.rank = int(keep.sum())
        self._sw = sw

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def residual(self, s: np.ndarray) -> np.ndarray:
        """Weighted residual ``sqrt(w) (s - P s)`` of the best approximation."""
        ws = self._sw * s
        return ws - self.orth @ (self.orth.T @ ws)

    def coefficients(self, s: np.ndarray) -> np.ndarray:
        sw = self._sw
        return np.linalg.lstsq(sw[:, None] * self.values, sw * s, rcond=None)[0]


class DistributedTarget:
    """Squared distance of the deformed sensor to the template span,
    weighted by the Jacobian of ``Psi``."""

    def __init__(self, space: DisplacementSpace, gm: GeometricMap, sensor: Sensor, templates: TemplateSpace):
        self.space = space
        self.sensor = sensor
        self.templates = templates
        self.points = space.quadrature_points
        self.table = space.quadrature_table
        self.n_clamped = 0

    @staticmethod
    def quadrature_weights(space: DisplacementSpace, gm: GeometricMap) -> np.ndarray:
        return space.quadrature_weights * gm.quadrature_jacobians(space.quad).ravel()

    def deformed_sensor(self, a):
        d, _ = self.space.displacement(a, self.table, with_gradient=False)
        vals, grads, n_cl = self.sensor(self.points + d)
        self.n_clamped = n_cl
        return vals, grads

    def value_grad(self, a):
        s, gs = self.deformed_sensor(a)
        rw = self.templates.residual(s)
        val = float(rw @ rw)
        ds = 2.0 * self.templates._sw * rw
        gx = ds[:, None] * gs
        return val, _moved_chain(self.space, self.table, gx)


@dataclass
class CompositeObjective:
    """``f_tg + xi * (f_jac + f_msh + P)`` in reduced coordinates ``a = W b``.

    Parameters
    ----------
    targets : list of (term, weight)
    penalties : dict name -> term
    """

    targets: list
    penalties: dict
    cfg: PenaltyConfig
    W: np.ndarray | None = None
    last: dict = field(default_factory=dict)

    def full(self, b):
        b = np.asarray(b, dtype=float)
        return b if self.W is None else self.W @ b

    def value_grad(self, b):
        a = self.full(b)
        tg = 0.0
        g = np.zeros_like(a)
        parts = {}
        for term, w in self.targets:
            v, gt = term.value_grad(a)
            tg += w * v
            g += w * gt
        parts["target"] = tg
        pen = 0.0
        for name, term in self.penalties.items():
            v, gp = term.value_grad(a)
            parts[name] = v
            pen += v
            g += self.cfg.xi * gp
        val = tg + self.cfg.xi * pen
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise NonFiniteObjective("objective or gradient is not finite")
        self.last = parts
        if self.W is not None:
            g = self.W.T @ g
        return val, g

    def target_value(self, b) -> float:
        a = self.full(b)
        return float(sum(w * term.value_grad(a)[0] for term, w in self.targets))


def build_penalties(space, gm, pb_mesh, cfg: PenaltyConfig) -> dict:
    """Instantiate the active penalty terms."""
    out = {}
    if cfg.use_jac:
        out["jac"] = JacobianPenalty(space, cfg)
    if cfg.use_msh and pb_mesh is not None:
        out["msh"] = MeshQualityPenalty(space, gm, pb_mesh, cfg)
    if cfg.use_pen:
        out["pen"] = SmoothnessPenalty(space)
    return out


# -- boundary features ------------------------------------------------------------

def facet_profile(values: np.ndarray, lengths: np.ndarray):
    """Per-facet means of a field and of its tangential derivative.

    Parameters
    ----------
    values : ndarray, shape (nf, ns)
        Field samples at ``ns`` equispaced points along each ordered facet.
    lengths : ndarray, shape (nf,)
    """
    v = np.asarray(values, dtype=float)
    ln = np.asarray(lengths, dtype=float)
    # trapezoidal mean over equispaced samples
    means = (v[:, 1:] + v[:, :-1]).sum(axis=1) / (2.0 * (v.shape[1] - 1))
    slopes = (v[:, -1] - v[:, 0]) / ln  # mean of the tangential derivative
    return means, slopes


def detect_shock(means, slopes, lengths, midpoints, theta: float = 1.0, c_slope: float = 1e-2):
    """Midpoint of the first facet where the profile crosses ``theta`` downwards
    with a steep negative mean slope.

    Raises
    ------
    NoFeature
    """
    m = np.asarray(means, dtype=float)
    s = np.asarray(slopes, dtype=float)
    ln = np.asarray(lengths, dtype=float)
    for j in range(m.size - 1):
        if m[j] > theta > m[j + 1] and s[j] < -c_slope / ln[j]:
            return np.asarray(midpoints)[j], j
    raise NoFeature("no facet satisfies the crossing and slope conditions")


def local_maxima(values) -> np.ndarray:
    """Indices of strict interior local maxima of a 1D profile."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return np.zeros(0, dtype=np.int64)
    inner = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])
    return np.flatnonzero(inner) + 1
