"""Curved mesh construction by morphing a straight mesh onto boundary curves.

Curved boundary edges of the straight mesh are bound to dense polylines.
A degree-``k`` displacement is sought that keeps every vertex in place, moves
the Gauss-Lobatto points of each bound edge onto the curve within ``delta`` and
minimises the Jacobian barrier plus the broken Hessian seminorm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import CurveEdgeMismatch, InadmissibleMesh
from .mesh import BoundaryFacet, CurvedMesh, linearize
from .objective import JacobianPenalty, PenaltyConfig, SmoothnessPenalty
from .optimize import augmented_lagrangian
from .reference import gauss_lobatto
from .space import SIGMA_BETA, DisplacementSpace, PointTable

__all__ = ["Polyline", "MorphProblem", "MorphResult", "sample_boundary", "solve_morph", "MIN_SAMPLES"]

MIN_SAMPLES = 128
DELTA = 1e-6


class Polyline:
    """Dense polyline with a chord-length cubic spline through its samples."""

    def __init__(self, points, name: str = "curve"):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("polyline points must have shape (n, 2)")
        if pts.shape[0] < MIN_SAMPLES:
            raise ValueError(f"polyline needs at least {MIN_SAMPLES} samples, got {pts.shape[0]}")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise ValueError("polyline has repeated consecutive samples")
        self.points = pts
        self.name = name
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.spline = CubicSpline(self.s, pts, axis=0)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def __call__(self, s):
        return self.spline(np.clip(np.asarray(s, dtype=float), 0.0, self.length))

    def project(self, p):
        """Chord-length position of the nearest polyline point and the distance."""
        p = np.asarray(p, dtype=float)
        a = self.points[:-1]
        d = np.diff(self.points, axis=0)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
        q = a + t[:, None] * d
        dist = np.hypot(*(q - p).T)
        i = int(np.argmin(dist))
        return float(self.s[i] + t[i] * (self.s[i + 1] - self.s[i])), float(dist[i])

    def to_json(self, facets) -> dict:
        return {"name": self.name, "points": self.points.tolist(), "facets": [list(f) for f in facets]}


@dataclass
class MorphProblem:
    """Straight mesh, boundary curves and their facet bindings.

    ``bindings`` maps each curve index to a list of ``(element, local_facet)``.
    """

    mesh: CurvedMesh
    curves: list
    bindings: dict
    degree: int
    delta: float = DELTA
    cfg: PenaltyConfig = field(default_factory=PenaltyConfig)
    sigma_beta: float = SIGMA_BETA
    max_outer: int = 20

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass
class MorphResult:
    mesh: CurvedMesh
    x: np.ndarray
    y: np.ndarray
    max_violation: float
    min_jacobian: float
    objective: list
    violations: list
    outer: int


def _edge_of(pm, elem, local):
    if not (0 <= elem < pm.tri.n_elements and 0 <= local < 3):
        raise CurveEdgeMismatch(f"facet ({elem}, {local}) does not exist")
    eid = int(pm.element_edges[elem, local])
    if pm.edge_elements[eid, 1] >= 0:
        raise CurveEdgeMismatch(f"facet ({elem}, {local}) is not on the boundary")
    return eid


def sample_boundary(pm, curves, bindings, degree: int, tol: float = 1e-3):
    """Gauss-Lobatto point pairs on the bound edges.

    For each bound facet with vertices ``a -> b`` (element orientation), the
    chord points ``x = (1 - t) x_a + t x_b`` are paired with
    ``y = gamma(s_a + t (s_b - s_a))`` where ``s_a``, ``s_b`` are the
    chord-length positions of the vertices on the curve.  Endpoint pairs are
    set exactly equal.

    Returns
    -------
    x, y : ndarray (N, 2) with ``N = (degree + 1) * n_bound``
    elem : ndarray (N,)
        Owning element of every chord point.
    ref : ndarray (N, 2)
        Reference coordinates of every chord point.

    Raises
    ------
    CurveEdgeMismatch
        If a vertex of a bound facet is farther than ``tol`` times the facet
        length from its curve, or a facet is bound twice.
    """
    t = gauss_lobatto(degree + 1)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    xs, ys, els, refs = [], [], [], []
    seen = set()
    for ci in sorted(bindings):
        curve = curves[ci]
        for elem, local in bindings[ci]:
            elem, local = int(elem), int(local)
            eid = _edge_of(pm, elem, local)
            if eid in seen:
                raise CurveEdgeMismatch(f"facet ({elem}, {local}) is bound twice")
            seen.add(eid)
            va = pm.tri.triangles[elem, local]
            vb = pm.tri.triangles[elem, (local + 1) % 3]
            xa, xb = pm.tri.vertices[va], pm.tri.vertices[vb]
            length = float(np.hypot(*(xb - xa)))
            sa, da = curve.project(xa)
            sb, db = curve.project(xb)
            if max(da, db) > tol * length:
                raise CurveEdgeMismatch(
                    f"facet ({elem}, {local}) endpoints are {max(da, db):.2e} away from curve '{curve.name}'"
                )
            x = (1.0 - t)[:, None] * xa + t[:, None] * xb
            y = curve(sa + t * (sb - sa))
            y[0], y[-1] = xa, xb
            ra, rb = corners[local], corners[(local + 1) % 3]
            xs.append(x)
            ys.append(y)
            els.append(np.full(t.size, elem))
            refs.append((1.0 - t)[:, None] * ra + t[:, None] * rb)
    if not xs:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    return np.vstack(xs), np.vstack(ys), np.concatenate(els), np.vstack(refs)


def solve_morph(problem: MorphProblem) -> MorphResult:
    """Morph the straight mesh onto the bound curves.

    Raises
    ------
    CurveEdgeMismatch
        On inconsistent bindings.
    Infeasible
        If the constraint violation stays above ``delta``.
    InadmissibleMesh
        If the result has a nonpositive Jacobian at a quadrature point.
    """
    pm, _ = linearize(problem.mesh)
    k = problem.degree
    x, y, elem, ref = sample_boundary(pm, problem.curves, problem.bindings, k)
    free = sorted({int(pm.element_edges[e, f]) for ci in problem.bindings for e, f in problem.bindings[ci]})
    space = DisplacementSpace(pm, k, problem.sigma_beta, free_edges=free, fix_all_vertices=True)
    jac = JacobianPenalty(space, problem.cfg)
    pen = SmoothnessPenalty(space, broken=True)

    def fun(a):
        v1, g1 = jac.value_grad(a)
        v2, g2 = pen.value_grad(a)
        return v1 + v2, g1 + g2

    # displacement at the chord points is linear in a: u = B a
    table = PointTable(space.scalar, elem, ref)
    basis = space.basis_nodal()
    B = np.vstack([table.E @ basis[:, :, 0].T, table.E @ basis[:, :, 1].T])
    r0 = np.concatenate([x[:, 0] - y[:, 0], x[:, 1] - y[:, 1]])
    # aim at half the tolerance so the returned pairs meet it strictly
    bound = 0.5 * problem.delta
    A = np.vstack([B, -B])

    def cons(a):
        r = r0 + B @ a
        return np.concatenate([r, -r]) - bound, A

    res = augmented_lagrangian(
        fun, cons, np.zeros(space.dim), tol=0.5 * problem.delta, max_outer=problem.max_outer,
        inner_kwargs={"gtol": 1e-10, "max_iter": 2000},
    )
    u = space.nodal(res.x)
    nodes = space.scalar.coords[space.scalar.elem_dofs] + u[space.scalar.elem_dofs]
    facets = problem.mesh.boundary_facets
    if not facets:
        facets = tuple(
            BoundaryFacet(int(pm.edge_elements[eid, 0]), int(pm.edge_local[eid, 0]), pm.boundary_tags.get(int(eid), "boundary"))
            for eid in pm.boundary_edge_ids
        )
    names = {}
    for ci in problem.bindings:
        for e, f in problem.bindings[ci]:
            names[(int(e), int(f))] = problem.curves[ci].name
    facets = tuple(
        BoundaryFacet(bf.element, bf.local_facet, names.get((bf.element, bf.local_facet), bf.tag)) for bf in facets
    )
    out = CurvedMesh(k, nodes, facets, problem.mesh.periodic_pairs)
    mapped = x + (B @ res.x).reshape(2, -1).T
    viol = float(np.max(np.abs(mapped - y), initial=0.0))
    jmin = float(np.min(jac.jacobians(res.x)))
    if jmin <= 0:
        raise InadmissibleMesh(f"morphed mesh has nonpositive Jacobian {jmin:.3e}")
    return MorphResult(out, x, y, viol, jmin, res.history, res.violations, res.outer)
