"""Constrained vector finite element space of displacements on the polytope.

Displacements are continuous, elementwise polynomial of degree ``kappa`` on
the straight mesh, vanish at polytope vertices and are tangential on
boundary edges.  Periodic edge pairs tie displacements node by node.

The space carries a broken H^2 inner product (element Hessians and masses
plus interior-facet terms) and an orthonormal basis obtained from a
Cholesky factor of the reduced Gram matrix.  Coefficient vectors ``a``
always refer to that orthonormal basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from .errors import InconsistentPeriodicity, NonSPD
from .mesh import PolytopeMesh
from .reference import edge_node_slices, gauss_legendre_01, lattice_nodes, nodal_basis, simplex_quadrature

__all__ = [
    "SIGMA_BETA",
    "ScalarSpace",
    "PointTable",
    "GramParts",
    "DisplacementSpace",
    "build_displacement_space",
    "orthonormalize",
]

SIGMA_BETA = 10.0


class ScalarSpace:
    """Continuous P_kappa space with global node numbering.

    Nodes are numbered vertices first, then edge-interior nodes edge by edge
    (oriented from the lower to the higher vertex id), then element-interior
    nodes element by element.
    """

    def __init__(self, pm: PolytopeMesh, degree: int):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.pm = pm
        self.degree = k = degree
        tri = pm.tri
        nv, ne, nf = tri.vertices.shape[0], tri.n_elements, pm.edges.shape[0]
        n_edge = k - 1
        n_int = (k - 1) * (k - 2) // 2
        n_lp = (k + 1) * (k + 2) // 2
        self.n_nodes = nv + nf * n_edge + ne * n_int
        dofs = np.empty((ne, n_lp), dtype=np.int64)
        dofs[:, :3] = tri.triangles
        slices = edge_node_slices(k)
        for f in range(3):
            inner = slices[f][1:-1]
            eids = pm.element_edges[:, f]
            start = tri.triangles[:, f]
            forward = start == pm.edges[eids, 0]
            base = nv + eids * n_edge
            for j, loc in enumerate(inner):
                dofs[:, loc] = np.where(forward, base + j, base + (n_edge - 1 - j))
        first_int = 3 + 3 * n_edge
        for j in range(n_int):
            dofs[:, first_int + j] = nv + nf * n_edge + np.arange(ne) * n_int + j
        self.elem_dofs = dofs
        ref = lattice_nodes(k)
        coords = np.empty((self.n_nodes, 2))
        pts = tri.origin[:, None, :] + np.einsum("eij,nj->eni", tri.jac, ref)
        coords[dofs.ravel()] = pts.reshape(-1, 2)
        coords[:nv] = tri.vertices
        self.coords = coords
        # nodes of each global edge from edges[:, 0] to edges[:, 1]
        ed = np.empty((nf, k + 1), dtype=np.int64)
        ed[:, 0] = pm.edges[:, 0]
        ed[:, -1] = pm.edges[:, 1]
        for j in range(n_edge):
            ed[:, 1 + j] = nv + np.arange(nf) * n_edge + j
        self.edge_dofs = ed

    @property
    def basis(self):
        return nodal_basis(self.degree)


class PointTable:
    """Sparse evaluation operators of the scalar space at fixed points.

    ``E @ w`` gives values and ``Gx @ w``, ``Gy @ w`` the physical partial
    derivatives of a nodal field ``w`` at the points.
    """

    def __init__(self, space: ScalarSpace, elem: np.ndarray, ref: np.ndarray):
        self.elem = np.asarray(elem, dtype=np.int64)
        self.ref = np.asarray(ref, dtype=float)
        n = self.elem.size
        vals, grads = space.basis.eval(self.ref)
        binv = space.pm.tri.jac_inv[self.elem]
        pg = np.einsum("pnr,prj->pnj", grads, binv)
        cols = space.elem_dofs[self.elem]
        rows = np.repeat(np.arange(n), cols.shape[1])
        shape = (n, space.n_nodes)

        def mat(v):
            return sparse.csr_matrix((v.ravel(), (rows, cols.ravel())), shape=shape)

        self.E = mat(vals)
        self.Gx = mat(pg[..., 0])
        self.Gy = mat(pg[..., 1])

    @classmethod
    def at_points(cls, space: ScalarSpace, points: np.ndarray, clamp: bool = False):
        elem, lam, _ = space.pm.tri.locate(points, clamp=clamp)
        return cls(space, elem, lam[:, 1:])

    @property
    def n_points(self) -> int:
        return self.elem.size


def _phys_hessians(hess_ref: np.ndarray, binv: np.ndarray) -> np.ndarray:
    """Map reference Hessians (xx, xy, yy) to physical 2x2 Hessians.

    hess_ref : (..., n, 3), binv : (2, 2) broadcastable over leading dims.
    Returns (..., n, 2, 2).
    """
    h = np.empty(hess_ref.shape[:-1] + (2, 2))
    h[..., 0, 0] = hess_ref[..., 0]
    h[..., 0, 1] = h[..., 1, 0] = hess_ref[..., 1]
    h[..., 1, 1] = hess_ref[..., 2]
    return np.einsum("...ri,...nrs,...sj->...nij", binv, h, binv)


@dataclass
class GramParts:
    """Scalar sparse matrices of the broken H^2 form, each (N, N)."""

    hessian: sparse.csr_matrix
    mass: sparse.csr_matrix
    jump: sparse.csr_matrix
    average: sparse.csr_matrix

    @property
    def full(self):
        return (self.hessian + self.mass + self.jump + self.average).tocsr()

    @property
    def seminorm(self):
        return (self.hessian + self.jump + self.average).tocsr()

    @property
    def broken(self):
        return self.hessian


def facet_weights(pm: PolytopeMesh, degree: int, sigma_beta: float = SIGMA_BETA) -> np.ndarray:
    """Penalty weights ``sigma * kappa^2 / |F|`` for every edge."""
    v = pm.vertices[pm.edges]
    length = np.hypot(*(v[:, 1] - v[:, 0]).T)
    return sigma_beta * degree**2 / length


def assemble_gram(space: ScalarSpace, sigma_beta: float = SIGMA_BETA, quad=None) -> GramParts:
    """Assemble the scalar pieces of the broken H^2 inner product."""
    pm = space.pm
    tri = pm.tri
    k = space.degree
    quad = quad or simplex_quadrature(2 * k + 2)
    basis = space.basis
    vals, _, hess = basis.eval(quad.points, derivatives=2)
    ne = tri.n_elements
    n = space.n_nodes
    dofs = space.elem_dofs
    n_lp = dofs.shape[1]
    absdet = np.abs(tri.det)

    hp = _phys_hessians(hess[None], tri.jac_inv[:, None])  # (ne, nq, n_lp, 2, 2)
    wq = quad.weights[None, :] * absdet[:, None]
    k_hess = np.einsum("eq,eqaij,eqbij->eab", wq, hp, hp)
    k_mass = np.einsum("eq,qa,qb->eab", wq, vals, vals)
    rows = np.repeat(dofs, n_lp, axis=1).ravel()
    cols = np.tile(dofs, (1, n_lp)).ravel()
    hmat = sparse.csr_matrix((k_hess.ravel(), (rows, cols)), shape=(n, n))
    mmat = sparse.csr_matrix((k_mass.ravel(), (rows, cols)), shape=(n, n))

    # interior facets
    inner = pm.interior_edges
    beta = facet_weights(pm, k, sigma_beta)
    t, w = gauss_legendre_01(k + 1)
    jr, jc, jv, ar, ac, av = [], [], [], [], [], []
    for eid in inner:
        a, b = pm.vertices[pm.edges[eid]]
        length = float(np.hypot(*(b - a)))
        ep, em = pm.edge_elements[eid]
        pts = a + t[:, None] * (b - a)
        normal = _outward_normal(pm, ep, int(pm.edge_local[eid, 0]))
        sides = []
        for e in (ep, em):
            ref = (pts - tri.origin[e]) @ tri.jac_inv[e].T
            _, g, h = basis.eval(ref, derivatives=2)
            gphys = g @ tri.jac_inv[e]  # (nq, n_lp, 2)
            hphys = _phys_hessians(h, tri.jac_inv[e])
            sides.append((dofs[e], gphys @ normal, hphys))
        (dp, gnp, hpp), (dm, gnm, hpm) = sides
        ids = np.concatenate([dp, dm])
        jump = np.concatenate([gnp, -gnm], axis=1)  # (nq, 2 n_lp)
        avg = 0.5 * np.concatenate([hpp, hpm], axis=1)  # (nq, 2 n_lp, 2, 2)
        ww = w * length
        kj = beta[eid] * np.einsum("q,qa,qb->ab", ww, jump, jump)
        ka = (1.0 / beta[eid]) * np.einsum("q,qaij,qbij->ab", ww, avg, avg)
        rr = np.repeat(ids, ids.size)
        cc = np.tile(ids, ids.size)
        jr.append(rr)
        jc.append(cc)
        jv.append(kj.ravel())
        ar.append(rr)
        ac.append(cc)
        av.append(ka.ravel())

    def build(r, c, v):
        if not r:
            return sparse.csr_matrix((n, n))
        return sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n))

    return GramParts(hmat, mmat, build(jr, jc, jv), build(ar, ac, av))


def _outward_normal(pm: PolytopeMesh, elem: int, local: int) -> np.ndarray:
    tri = pm.tri.triangles[elem]
    a, b = pm.vertices[tri[local]], pm.vertices[tri[(local + 1) % 3]]
    t = b - a
    nrm = np.array([t[1], -t[0]])
    return nrm / np.hypot(*nrm)


def _find_root(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def build_constraints(space: ScalarSpace, free_edges=(), fix_all_vertices: bool = False):
    """Reduced parameterisation ``U = T c`` of admissible nodal displacements.

    Returns a sparse (2N, M0) matrix ``T`` ordered component-major
    (all x components, then all y components).

    ``free_edges`` lists boundary edge ids whose interior nodes may move in
    any direction; ``fix_all_vertices`` pins every mesh vertex instead of only
    the polytope vertices.  Both serve mesh morphing.
    """
    pm = space.pm
    n = space.n_nodes
    scale = pm.tri.diameter
    periodic_edges = {e for pair in pm.periodic_edges for e in pair}
    skip = periodic_edges | {int(e) for e in free_edges}
    # admissible directions per node: None = free (R^2), else (k, 2) basis
    allowed: list = [None] * n
    vset = set(pm.polytope_vertices.tolist())
    if fix_all_vertices:
        vset = set(range(pm.tri.vertices.shape[0]))
    for eid in pm.boundary_edge_ids:
        if int(eid) in skip:
            continue
        tvec = pm.edge_tangent(int(eid))
        for node in space.edge_dofs[eid]:
            node = int(node)
            allowed[node] = _intersect(allowed[node], tvec[None, :])
    for v in vset:
        allowed[v] = np.zeros((0, 2))

    # periodic ties by translation
    parent = list(range(n))
    for e1, e2 in pm.periodic_edges:
        n1 = space.edge_dofs[e1]
        n2 = space.edge_dofs[e2]
        if n1.size != n2.size:
            raise InconsistentPeriodicity(f"edges {e1} and {e2} have different node counts")
        x1, x2 = space.coords[n1], space.coords[n2]
        shift = x2.mean(axis=0) - x1.mean(axis=0)
        for j, node in enumerate(n2):
            d = np.hypot(*(x1 - (space.coords[node] - shift)).T)
            m = int(np.argmin(d))
            if d[m] > 1e-9 * scale:
                raise InconsistentPeriodicity(f"edge {e2} is not a translate of edge {e1}")
            ra, rb = _find_root(parent, int(n1[m])), _find_root(parent, int(node))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([_find_root(parent, i) for i in range(n)])
    classes: dict = {}
    for i, r in enumerate(roots):
        classes.setdefault(int(r), []).append(i)

    rows, cols, vals = [], [], []
    col = 0
    for r in sorted(classes):
        members = classes[r]
        sub = None
        for m in members:
            sub = _intersect(sub, allowed[m]) if allowed[m] is not None else sub
        basis = np.eye(2) if sub is None else sub
        for vec in basis:
            for m in members:
                for c in range(2):
                    if vec[c] != 0.0:
                        rows.append(c * n + m)
                        cols.append(col)
                        vals.append(vec[c])
            col += 1
    T = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * n, col))
    return T


def _intersect(a, b):
    """Intersection of two subspaces of R^2 given by row bases (None = R^2)."""
    if a is None:
        return b
    if b is None:
        return a
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((0, 2))
    if a.shape[0] == 2:
        return b
    if b.shape[0] == 2:
        return a
    cross = a[0, 0] * b[0, 1] - a[0, 1] * b[0, 0]
    if abs(cross) <= 1e-12:
        return a
    return np.zeros((0, 2))


def orthonormalize(gram: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``gram = L L^T``.

    The functions ``T L^{-T} e_i`` are then orthonormal.

    Raises
    ------
    NonSPD
    """
    g = np.asarray(gram, dtype=float)
    if g.size == 0:
        return np.zeros((0, 0))
    try:
        return sla.cholesky(0.5 * (g + g.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonSPD(f"reduced Gram matrix is not positive definite: {exc}") from exc


class DisplacementSpace:
    """Admissible displacements with an orthonormal basis.

    Attributes
    ----------
    scalar : ScalarSpace
    T : sparse matrix (2N, M)
        Constraint parameterisation.
    parts : GramParts
    chol : ndarray (M, M)
        Cholesky factor of the reduced Gram matrix.
    """

    def __init__(
        self,
        pm: PolytopeMesh,
        degree: int,
        sigma_beta: float = SIGMA_BETA,
        quad_degree=None,
        free_edges=(),
        fix_all_vertices: bool = False,
    ):
        self.pm = pm
        self.degree = degree
        self.sigma_beta = sigma_beta
        self.scalar = ScalarSpace(pm, degree)
        self.quad = simplex_quadrature(quad_degree if quad_degree is not None else 2 * degree + 2)
        self.T = build_constraints(self.scalar, free_edges, fix_all_vertices)
        self.parts = assemble_gram(self.scalar, sigma_beta, self.quad)
        self.chol = orthonormalize(self.reduce(self.parts.full))

    @property
    def dim(self) -> int:
        return self.T.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.scalar.n_nodes

    def reduce(self, scalar_matrix) -> np.ndarray:
        """``T^T (I_2 (x) A) T`` as a dense matrix."""
        big = sparse.block_diag([scalar_matrix, scalar_matrix]).tocsr()
        return np.asarray((self.T.T @ big @ self.T).todense())

    def to_basis(self, reduced_matrix: np.ndarray) -> np.ndarray:
        """Express a reduced quadratic form in the orthonormal basis."""
        x = sla.solve_triangular(self.chol, reduced_matrix, lower=True)
        return sla.solve_triangular(self.chol, x.T, lower=True).T

    @cached_property
    def penalty_matrix(self) -> np.ndarray:
        """Quadratic form of the smoothness seminorm in coefficient space."""
        m = self.to_basis(self.reduce(self.parts.seminorm))
        return 0.5 * (m + m.T)

    @cached_property
    def broken_matrix(self) -> np.ndarray:
        m = self.to_basis(self.reduce(self.parts.broken))
        return 0.5 * (m + m.T)

    def gram_in_basis(self) -> np.ndarray:
        return self.to_basis(self.reduce(self.parts.full))

    # -- coefficient <-> nodal -------------------------------------------
    def nodal(self, a: np.ndarray) -> np.ndarray:
        """Nodal displacement (N, 2) of coefficient vector ``a``."""
        a = np.asarray(a, dtype=float)
        c = sla.solve_triangular(self.chol, a, lower=True, trans="T") if a.size else a
        u = self.T @ c if a.size else np.zeros(2 * self.n_nodes)
        return np.column_stack([u[: self.n_nodes], u[self.n_nodes :]])

    def nodal_adjoint(self, g_nodal: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`nodal`: maps (N, 2) nodal sensitivities to ``d/da``."""
        g = np.concatenate([g_nodal[:, 0], g_nodal[:, 1]])
        c = self.T.T @ g
        if c.size == 0:
            return c
        return sla.solve_triangular(self.chol, c, lower=True)

    def basis_nodal(self) -> np.ndarray:
        """All basis functions as nodal arrays, shape (M, N, 2)."""
        eye = np.eye(self.dim)
        return np.stack([self.nodal(e) for e in eye]) if self.dim else np.zeros((0, self.n_nodes, 2))

    # -- evaluation --------------------------------------------------------
    def table(self, points: np.ndarray, clamp: bool = False) -> PointTable:
        return PointTable.at_points(self.scalar, points, clamp=clamp)

    @cached_property
    def quadrature_table(self) -> PointTable:
        """Evaluation operators at the volume quadrature points of every element."""
        ne = self.pm.tri.n_elements
        nq = self.quad.points.shape[0]
        elem = np.repeat(np.arange(ne), nq)
        ref = np.tile(self.quad.points, (ne, 1))
        return PointTable(self.scalar, elem, ref)

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        tri = self.pm.tri
        pts = tri.origin[:, None, :] + np.einsum("eij,qj->eqi", tri.jac, self.quad.points)
        return pts.reshape(-1, 2)

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        return (self.quad.weights[None, :] * np.abs(self.pm.tri.det)[:, None]).ravel()

    def displacement(self, a, table: PointTable, with_gradient: bool = True):
        """Displacement at the table points and optionally its gradient (n, 2, 2)."""
        u = self.nodal(a)
        val = np.column_stack([table.E @ u[:, 0], table.E @ u[:, 1]])
        if not with_gradient:
            return val, None
        g = np.empty((table.n_points, 2, 2))
        g[:, 0, 0] = table.Gx @ u[:, 0]
        g[:, 0, 1] = table.Gy @ u[:, 0]
        g[:, 1, 0] = table.Gx @ u[:, 1]
        g[:, 1, 1] = table.Gy @ u[:, 1]
        return val, g

    def eval_np(self, a, points: np.ndarray, table: PointTable | None = None):
        """Evaluate ``N_p(a) = id + sum a_i phi_i`` and its Jacobian at points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        table = table if table is not None else self.table(pts)
        d, g = self.displacement(a, table)
        return pts + d, g + np.eye(2)[None]

    # -- pointwise seminorm oracle -------------------------------------------
    def seminorm_pointwise(self, nodal_field: np.ndarray, broken: bool = False) -> float:
        """Evaluate the smoothness seminorm of a nodal vector field by direct
        quadrature, without the assembled matrices."""
        u = np.asarray(nodal_field, dtype=float)
        pm, sc = self.pm, self.scalar
        tri = pm.tri
        basis = sc.basis
        _, _, hess = basis.eval(self.quad.points, derivatives=2)
        total = 0.0
        for e in range(tri.n_elements):
            hp = _phys_hessians(hess, tri.jac_inv[e])  # (nq, n_lp, 2, 2)
            hu = np.einsum("qnij,nc->qcij", hp, u[sc.elem_dofs[e]])
            total += abs(tri.det[e]) * float(np.einsum("q,qcij,qcij->", self.quad.weights, hu, hu))
        if broken:
            return total
        t, w = gauss_legendre_01(self.degree + 1)
        beta = facet_weights(pm, self.degree, self.sigma_beta)
        for eid in pm.interior_edges:
            jump, avg = self._facet_traces(u, int(eid), t)
            a, b = pm.vertices[pm.edges[eid]]
            ww = w * np.hypot(*(b - a))
            total += beta[eid] * float(np.einsum("q,qc,qc->", ww, jump, jump))
            total += float(np.einsum("q,qcij,qcij->", ww, avg, avg)) / beta[eid]
        return total

    def facet_jump_energy(self, nodal_field: np.ndarray) -> float:
        """Weighted gradient-jump contribution alone, by direct quadrature."""
        u = np.asarray(nodal_field, dtype=float)
        pm = self.pm
        t, w = gauss_legendre_01(self.degree + 1)
        beta = facet_weights(pm, self.degree, self.sigma_beta)
        total = 0.0
        for eid in pm.interior_edges:
            jump, _ = self._facet_traces(u, int(eid), t)
            a, b = pm.vertices[pm.edges[eid]]
            total += beta[eid] * float(np.einsum("q,qc,qc->", w * np.hypot(*(b - a)), jump, jump))
        return total

    def _facet_traces(self, u, eid, t):
        pm, sc = self.pm, self.scalar
        tri = pm.tri
        a, b = pm.vertices[pm.edges[eid]]
        pts = a + t[:, None] * (b - a)
        ep, em = pm.edge_elements[eid]
        normal = _outward_normal(pm, int(ep), int(pm.edge_local[eid, 0]))
        out = []
        for e in (ep, em):
            ref = (pts - tri.origin[e]) @ tri.jac_inv[e].T
            _, g, h = sc.basis.eval(ref, derivatives=2)
            gp = g @ tri.jac_inv[e]
            hp = _phys_hessians(h, tri.jac_inv[e])
            ue = u[sc.elem_dofs[e]]
            out.append((np.einsum("qnj,nc,j->qc", gp, ue, normal), np.einsum("qnij,nc->qcij", hp, ue)))
        (gp_, hp_), (gm_, hm_) = out
        return gp_ - gm_, 0.5 * (hp_ + hm_)

    def seminorm_matrix_form(self, nodal_field: np.ndarray, broken: bool = False) -> float:
        """Seminorm via the assembled scalar matrices (componentwise)."""
        u = np.asarray(nodal_field, dtype=float)
        mat = self.parts.broken if broken else self.parts.seminorm
        return float(sum(u[:, c] @ (mat @ u[:, c]) for c in range(2)))


def build_displacement_space(pm: PolytopeMesh, degree: int, sigma_beta: float = SIGMA_BETA, quad_degree=None):
    """Assemble the constrained space, its Gram structure and orthonormal basis."""
    return DisplacementSpace(pm, degree, sigma_beta, quad_degree)
