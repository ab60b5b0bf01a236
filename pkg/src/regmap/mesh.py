"""Curved meshes, their polytope linearisation and the geometric map ``Psi``.

A :class:`CurvedMesh` stores, per element, the coordinates of the
degree-``kappa`` lattice nodes.  :func:`linearize` extracts the straight-sided
mesh spanned by the element vertices (the *polytope mesh*) and returns the
piecewise polynomial map ``Psi`` from the polytope onto the curved domain,
defined elementwise as ``Psi_k o A_k^{-1}`` where ``A_k`` is the affine map
of the reference triangle onto the straight element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _kernels
from .errors import (
    InadmissibleMesh,
    NoConvergence,
    OutsideDomain,
    PointNotOnBoundary,
)
from .reference import edge_node_slices, lattice_nodes, nodal_basis, simplex_quadrature

__all__ = [
    "TOL_LOC",
    "dedup_points",
    "TriMesh",
    "BoundaryFacet",
    "CurvedMesh",
    "PolytopeMesh",
    "GeometricMap",
    "BoundaryGeometry",
    "HypothesisReport",
    "DeformedMeshReport",
    "linearize",
    "check_hypothesis",
    "constant_C",
    "deformed_quality",
    "mesh_quality",
]

TOL_LOC = 1e-10
ANGLE_TOL = 1e-6
N_CANDIDATES = 8
MAX_NEWTON = 25
QUALITY_CAP = 1e12


def dedup_points(points: np.ndarray, tol: float):
    """Merge points closer than ``tol``.

    Returns
    -------
    unique : ndarray, shape (m, 2)
        Representatives in order of first occurrence.
    inverse : ndarray, shape (n,)
        Index of the representative of each input point.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    pairs = cKDTree(pts).query_pairs(tol, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    first = np.full(labels.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    inverse = rank[labels]
    return pts[first[order]].copy(), inverse


class TriMesh:
    """Straight-sided triangle mesh with KD-tree accelerated point location.

    Parameters
    ----------
    vertices : ndarray, shape (nv, 2)
    triangles : ndarray, shape (ne, 3)
        Counter-clockwise vertex indices.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must have shape (n, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must have shape (m, 3)")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        v = self.vertices[self.triangles]
        self.origin = np.ascontiguousarray(v[:, 0])
        b = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)  # columns
        self.jac = b
        self.det = b[:, 0, 0] * b[:, 1, 1] - b[:, 0, 1] * b[:, 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.empty_like(b)
            inv[:, 0, 0] = b[:, 1, 1]
            inv[:, 0, 1] = -b[:, 0, 1]
            inv[:, 1, 0] = -b[:, 1, 0]
            inv[:, 1, 1] = b[:, 0, 0]
            inv /= self.det[:, None, None]
        self.jac_inv = np.ascontiguousarray(inv)
        self.centroids = v.mean(axis=1)
        self.areas = 0.5 * self.det
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        self.diameter = float(np.hypot(*(hi - lo)))

    @property
    def n_elements(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    @cached_property
    def vertex_elements(self) -> np.ndarray:
        """Padded table of elements incident to each vertex (``-1`` fill)."""
        nv = self.vertices.shape[0]
        lists = [[] for _ in range(nv)]
        for e, tri in enumerate(self.triangles):
            for v in tri:
                lists[v].append(e)
        width = max(len(x) for x in lists) if lists else 1
        out = np.full((nv, width), -1, dtype=np.int64)
        for v, x in enumerate(lists):
            out[v, : len(x)] = x
        return out

    @cached_property
    def p1_gradients(self) -> np.ndarray:
        """Physical gradients of the three P1 hat functions, shape (ne, 3, 2)."""
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return np.einsum("vr,erj->evj", ref, self.jac_inv)

    def locate(self, points: np.ndarray, clamp: bool = False, tol: float = TOL_LOC):
        """Find the element containing each point.

        Parameters
        ----------
        points : ndarray, shape (n, 2)
        clamp : bool
            If true, points outside the mesh are attributed to the nearest
            candidate element (barycentric coordinates then leave [0, 1]).
        tol : float
            Barycentric containment tolerance.

        Returns
        -------
        elem : ndarray of int, shape (n,)
        lam : ndarray, shape (n, 3)
        found : ndarray of bool, shape (n,)

        Raises
        ------
        OutsideDomain
            If ``clamp`` is false and some point is not contained.
        """
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        k = min(N_CANDIDATES, self.n_elements)
        _, cand = self._tree.query(pts, k=k)
        cand = np.ascontiguousarray(np.asarray(cand, dtype=np.int64).reshape(len(pts), k))
        elem, lam, found = _kernels.locate_candidates(pts, self.origin, self.jac_inv, cand, tol)
        elem = np.asarray(elem, dtype=np.int64)
        lam = np.asarray(lam)
        found = np.asarray(found, dtype=bool)
        # points on shared facets/vertices: prefer the lowest element index
        amb = np.flatnonzero(found & (lam.min(axis=1) < tol))
        if amb.size:
            ve = self.vertex_elements
            neigh = ve[self.triangles[elem[amb]]].reshape(amb.size, -1)
            neigh = np.where(neigh < 0, elem[amb][:, None], neigh)
            e2, l2, f2 = _kernels.locate_candidates(
                pts[amb], self.origin, self.jac_inv, np.ascontiguousarray(neigh), tol
            )
            e2 = np.asarray(e2)
            better = np.asarray(f2, dtype=bool) & (e2 < elem[amb])
            elem[amb[better]] = e2[better]
            lam[amb[better]] = np.asarray(l2)[better]
        if not clamp and not found.all():
            bad = np.flatnonzero(~found)
            raise OutsideDomain(f"{bad.size} point(s) outside the mesh, first at {pts[bad[0]].tolist()}")
        return elem, lam, found

    def interpolate(self, values: np.ndarray, points: np.ndarray, clamp: bool = True):
        """Evaluate a P1 field and its gradient at ``points``.

        Returns values, gradients (n, 2) and the number of clamped points.
        """
        elem, lam, found = self.locate(points, clamp=clamp)
        vals, grads = _kernels.p1_interpolate(
            elem, np.ascontiguousarray(lam), self.triangles,
            np.ascontiguousarray(values, dtype=float),
            np.ascontiguousarray(self._field_gradients(values)),
        )
        return np.asarray(vals), np.asarray(grads), int((~found).sum())

    def _field_gradients(self, values):
        return np.einsum("ev,evj->ej", np.asarray(values, dtype=float)[self.triangles], self.p1_gradients)

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        out = np.zeros(self.vertices.shape[0])
        np.add.at(out, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return out

    @cached_property
    def mass_matrix(self):
        """Consistent P1 mass matrix (sparse CSR)."""
        local = (np.ones((3, 3)) + np.eye(3)) / 12.0
        vals = self.areas[:, None, None] * local[None]
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        n = self.vertices.shape[0]
        return coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Directed boundary edges ``(a, b)`` with the mesh on the left."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        key = np.sort(e, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return e[counts[inv.ravel()] == 1]


@dataclass(frozen=True)
class BoundaryFacet:
    element: int
    local_facet: int
    tag: str = "boundary"


@dataclass(frozen=True)
class CurvedMesh:
    """High-order triangular mesh given by per-element lattice node coordinates.

    Parameters
    ----------
    degree : int
    nodes : ndarray, shape (ne, n_lp, 2)
        Node coordinates in the lattice ordering of :mod:`regmap.reference`.
    boundary_facets : tuple of BoundaryFacet
        Tagged boundary facets.  If empty, every unmatched facet is tagged
        ``"boundary"`` on linearisation.
    periodic_pairs : tuple of (int, int)
        Pairs of indices into ``boundary_facets``.
    """

    degree: int
    nodes: np.ndarray
    boundary_facets: tuple = ()
    periodic_pairs: tuple = ()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        n_lp = (self.degree + 1) * (self.degree + 2) // 2
        if nodes.ndim != 3 or nodes.shape[1:] != (n_lp, 2):
            raise InadmissibleMesh(
                f"expected element node array of shape (ne, {n_lp}, 2), got {nodes.shape}"
            )
        if not np.all(np.isfinite(nodes)):
            raise InadmissibleMesh("non-finite node coordinates")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "boundary_facets", tuple(self.boundary_facets))
        object.__setattr__(self, "periodic_pairs", tuple(tuple(int(v) for v in p) for p in self.periodic_pairs))

    @property
    def n_elements(self) -> int:
        return self.nodes.shape[0]

    @cached_property
    def diameter(self) -> float:
        flat = self.nodes.reshape(-1, 2)
        return float(np.hypot(*(flat.max(axis=0) - flat.min(axis=0))))

    @cached_property
    def global_nodes(self):
        """Deduplicated node coordinates and the element-to-node table."""
        flat = self.nodes.reshape(-1, 2)
        coords, inv = dedup_points(flat, 1e-12 * max(self.diameter, 1e-300))
        return coords, inv.reshape(self.n_elements, -1)

    @cached_property
    def vertex_mesh(self) -> TriMesh:
        """Straight-sided mesh spanned by the element vertices."""
        flat = self.nodes[:, :3].reshape(-1, 2)
        verts, inv = dedup_points(flat, 1e-12 * max(self.diameter, 1e-300))
        return TriMesh(verts, inv.reshape(-1, 3))

    @classmethod
    def from_linear(cls, vertices, triangles, degree: int = 1, boundary_facets=(), periodic_pairs=()):
        """Elevate a straight-sided mesh to degree ``degree`` (affine node placement)."""
        verts = np.asarray(vertices, dtype=float)
        tri = np.asarray(triangles, dtype=np.int64)
        ref = lattice_nodes(degree)
        v = verts[tri]
        nodes = v[:, None, 0] + ref[None, :, :1] * (v[:, None, 1] - v[:, None, 0]) + ref[None, :, 1:] * (
            v[:, None, 2] - v[:, None, 0]
        )
        return cls(degree, nodes, tuple(boundary_facets), tuple(periodic_pairs))

    def with_nodes(self, nodes: np.ndarray) -> "CurvedMesh":
        return CurvedMesh(self.degree, nodes, self.boundary_facets, self.periodic_pairs)

    def to_json(self) -> dict:
        return {
            "degree": int(self.degree),
            "elements": self.nodes.tolist(),
            "boundary_facets": [
                {"element": int(f.element), "local_facet": int(f.local_facet), "tag": f.tag}
                for f in self.boundary_facets
            ],
            "periodic_pairs": [list(p) for p in self.periodic_pairs],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CurvedMesh":
        try:
            degree = int(data["degree"])
            nodes = np.asarray(data["elements"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InadmissibleMesh(f"malformed mesh document: {exc}") from exc
        facets = tuple(
            BoundaryFacet(int(f["element"]), int(f["local_facet"]), str(f.get("tag", "boundary")))
            for f in data.get("boundary_facets", [])
        )
        pairs = tuple(tuple(int(v) for v in p) for p in data.get("periodic_pairs", []))
        return cls(degree, nodes, facets, pairs)


@dataclass
class PolytopeMesh:
    """Linearised mesh with the boundary bookkeeping needed downstream.

    Attributes
    ----------
    tri : TriMesh
        The straight-sided elements.
    edges : ndarray, shape (nf, 2)
        Global edges as sorted vertex pairs.
    edge_elements : ndarray, shape (nf, 2)
        Adjacent elements; the second entry is ``-1`` on the boundary.
    edge_local : ndarray, shape (nf, 2)
        Local facet index of the edge in each adjacent element.
    element_edges : ndarray, shape (ne, 3)
        Global edge of each local facet.
    boundary_tags : dict
        Boundary edge id -> tag.
    facet_edges : ndarray
        Global edge id of each entry of the curved mesh's boundary facet list.
    periodic_edges : list of (int, int)
    polytope_vertices : ndarray
        Vertex set ``V``: boundary vertices joining two non-parallel edges.
    angular_vertices : ndarray
        Boundary vertices where the curved boundary has a tangent jump.
    """

    tri: TriMesh
    edges: np.ndarray
    edge_elements: np.ndarray
    edge_local: np.ndarray
    element_edges: np.ndarray
    boundary_tags: dict
    facet_edges: np.ndarray
    periodic_edges: list
    polytope_vertices: np.ndarray
    angular_vertices: np.ndarray
    boundary_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def vertices(self) -> np.ndarray:
        return self.tri.vertices

    @property
    def triangles(self) -> np.ndarray:
        return self.tri.triangles

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_elements[:, 1] >= 0)

    @property
    def boundary_edge_ids(self) -> np.ndarray:
        return np.flatnonzero(self.edge_elements[:, 1] < 0)

    @property
    def fictitious_vertices(self) -> np.ndarray:
        return np.setdiff1d(self.polytope_vertices, self.angular_vertices)

    @property
    def area(self) -> float:
        return float(self.tri.areas.sum())

    def edge_tangent(self, edge: int) -> np.ndarray:
        a, b = self.vertices[self.edges[edge]]
        t = b - a
        return t / np.hypot(*t)

    def locate(self, points, clamp: bool = False):
        return self.tri.locate(points, clamp=clamp)


def _edge_reference_points(local_facet: int, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if local_facet == 0:
        return np.column_stack([t, np.zeros_like(t)])
    if local_facet == 1:
        return np.column_stack([1.0 - t, t])
    return np.column_stack([np.zeros_like(t), 1.0 - t])


_EDGE_DIRECTION = np.array([[1.0, 0.0], [-1.0, 1.0], [0.0, -1.0]])


def _segments_cross(p1, p2, q1, q2, eps):
    """Proper intersection test between two batches of segments."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > eps) & (d2 < -eps) | (d1 < -eps) & (d2 > eps)) & ((d3 > eps) & (d4 < -eps) | (d3 < -eps) & (d4 > eps))


def linearize(mesh: CurvedMesh, angle_tol: float = ANGLE_TOL):
    """Build the polytope mesh and the geometric map of a curved mesh.

    Parameters
    ----------
    angle_tol : float
        Tangent jump (radians) above which a boundary vertex is angular.

    Returns
    -------
    (PolytopeMesh, GeometricMap)

    Raises
    ------
    InadmissibleMesh
        On inverted or degenerate elements, non-conforming or non-manifold
        facets, a self-intersecting polytope boundary, a vertex that does not
        join exactly two boundary edges, or an angular point of the curved
        boundary that is not a polytope vertex.
    """
    k = mesh.degree
    tri = mesh.vertex_mesh
    ne = tri.n_elements
    scale = max(mesh.diameter, 1e-300)

    # canonical vertex coordinates shared by all elements
    nodes = mesh.nodes.copy()
    nodes[:, :3] = tri.vertices[tri.triangles]
    mesh = mesh.with_nodes(nodes)

    if np.any(tri.det <= 1e-14 * scale**2):
        bad = int(np.flatnonzero(tri.det <= 1e-14 * scale**2)[0])
        raise InadmissibleMesh(f"straight element {bad} is inverted or degenerate")

    slices = edge_node_slices(k)
    edge_map: dict = {}
    for e in range(ne):
        for f in range(3):
            a, b = tri.triangles[e, f], tri.triangles[e, (f + 1) % 3]
            edge_map.setdefault((min(a, b), max(a, b)), []).append((e, f))
    keys = sorted(edge_map)
    nf = len(keys)
    edges = np.array(keys, dtype=np.int64).reshape(nf, 2)
    edge_elements = np.full((nf, 2), -1, dtype=np.int64)
    edge_local = np.full((nf, 2), -1, dtype=np.int64)
    element_edges = np.zeros((ne, 3), dtype=np.int64)
    tol_node = 1e-10 * scale
    for i, key in enumerate(keys):
        owners = edge_map[key]
        if len(owners) > 2:
            raise InadmissibleMesh(f"edge {tuple(int(v) for v in key)} is shared by {len(owners)} elements")
        if len(owners) == 2:
            (e1, f1), (e2, f2) = owners
            n1 = nodes[e1, slices[f1]]
            n2 = nodes[e2, slices[f2]][::-1]
            if np.max(np.abs(n1 - n2)) > tol_node:
                raise InadmissibleMesh(
                    f"elements {e1} and {e2} share the straight edge {tuple(int(v) for v in key)} but their curved facets differ; "
                    "the linearised boundary collapses (mesh too coarse for this geometry)"
                )
        for j, (e, f) in enumerate(owners):
            edge_elements[i, j] = e
            edge_local[i, j] = f
            element_edges[e, f] = i

    bnd = np.flatnonzero(edge_elements[:, 1] < 0)
    bset = set(bnd.tolist())
    # tags and periodic pairs from the facet list
    tags = {}
    facet_edges = []
    if mesh.boundary_facets:
        for bf in mesh.boundary_facets:
            if not (0 <= bf.element < ne and 0 <= bf.local_facet < 3):
                raise InadmissibleMesh(f"boundary facet {bf} out of range")
            eid = int(element_edges[bf.element, bf.local_facet])
            if eid not in bset:
                raise InadmissibleMesh(f"facet {bf} is not on the boundary")
            tags[eid] = bf.tag
            facet_edges.append(eid)
        missing = bset - set(tags)
        if missing:
            raise InadmissibleMesh(f"{len(missing)} boundary facet(s) carry no tag")
    else:
        for eid in bnd:
            tags[int(eid)] = "boundary"
            facet_edges.append(int(eid))
        facets = tuple(BoundaryFacet(int(edge_elements[i, 0]), int(edge_local[i, 0])) for i in facet_edges)
        mesh = CurvedMesh(mesh.degree, mesh.nodes, facets, mesh.periodic_pairs)
    facet_edges = np.array(facet_edges, dtype=np.int64)
    periodic = []
    for p, q in mesh.periodic_pairs:
        if not (0 <= p < len(facet_edges) and 0 <= q < len(facet_edges)):
            raise InadmissibleMesh(f"periodic pair {(p, q)} references an unknown facet")
        periodic.append((int(facet_edges[p]), int(facet_edges[q])))

    # boundary regularity: every boundary vertex joins exactly two boundary edges
    deg = np.bincount(edges[bnd].ravel(), minlength=tri.vertices.shape[0])
    bverts = np.flatnonzero(deg > 0)
    if np.any(deg[bverts] != 2):
        v = int(bverts[np.flatnonzero(deg[bverts] != 2)[0]])
        raise InadmissibleMesh(f"boundary vertex {v} joins {deg[v]} boundary edges")

    seg = tri.vertices[edges[bnd]]
    if len(bnd) > 3:
        ii, jj = np.triu_indices(len(bnd), 1)
        crosses = _segments_cross(seg[ii, 0], seg[ii, 1], seg[jj, 0], seg[jj, 1], 1e-14 * scale**2)
        if np.any(crosses):
            raise InadmissibleMesh("the linearised boundary self-intersects")

    # polytope vertices: boundary vertices whose two edges are not parallel
    incident = {int(v): [] for v in bverts}
    for eid in bnd:
        for v in edges[eid]:
            incident[int(v)].append(int(eid))
    poly_v = []
    for v, (e1, e2) in incident.items():
        t1 = tri.vertices[edges[e1, 1]] - tri.vertices[edges[e1, 0]]
        t2 = tri.vertices[edges[e2, 1]] - tri.vertices[edges[e2, 0]]
        cross = abs(t1[0] * t2[1] - t1[1] * t2[0]) / (np.hypot(*t1) * np.hypot(*t2))
        if cross > 1e-12:
            poly_v.append(v)
    poly_v = np.array(sorted(poly_v), dtype=np.int64)

    basis = nodal_basis(k)
    geometry = BoundaryGeometry(mesh, tri, edges, edge_elements, edge_local, bnd, basis, angle_tol)
    angular = geometry.angular_vertices
    if not set(angular.tolist()) <= set(poly_v.tolist()):
        bad = sorted(set(angular.tolist()) - set(poly_v.tolist()))
        raise InadmissibleMesh(f"angular boundary point(s) at vertices {bad} are not polytope vertices")

    pm = PolytopeMesh(
        tri=tri,
        edges=edges,
        edge_elements=edge_elements,
        edge_local=edge_local,
        element_edges=element_edges,
        boundary_tags=tags,
        facet_edges=facet_edges,
        periodic_edges=periodic,
        polytope_vertices=poly_v,
        angular_vertices=angular,
        boundary_vertices=bverts,
    )
    gm = GeometricMap(mesh, pm, basis, geometry)
    jmin = float(gm.quadrature_jacobians().min())
    if not jmin > 0.0:
        raise InadmissibleMesh(f"elemental Jacobian is nonpositive (min {jmin:.3e})")
    return pm, gm


class GeometricMap:
    """The piecewise polynomial bijection from the polytope onto the curved domain."""

    def __init__(self, curved: CurvedMesh, poly: PolytopeMesh, basis=None, geometry=None):
        self.curved = curved
        self.poly = poly
        self.basis = basis if basis is not None else nodal_basis(curved.degree)
        self._geometry = geometry

    @property
    def degree(self) -> int:
        return self.curved.degree

    @property
    def diameter(self) -> float:
        return self.curved.diameter

    @property
    def geometry(self) -> "BoundaryGeometry":
        if self._geometry is None:
            p = self.poly
            self._geometry = BoundaryGeometry(
                self.curved, p.tri, p.edges, p.edge_elements, p.edge_local, p.boundary_edge_ids, self.basis
            )
        return self._geometry

    # -- element level -------------------------------------------------
    def element_eval(self, elem: np.ndarray, ref: np.ndarray, derivatives: int = 1):
        """Evaluate ``Psi_k`` at reference points of the given elements.

        Returns the physical points and, if requested, the reference
        gradient ``d Psi_k / d xref`` of shape (n, 2, 2).
        """
        out = self.basis.eval(ref, derivatives=min(derivatives, 1))
        x = self.curved.nodes[elem]
        y = np.einsum("pn,pnd->pd", out[0], x)
        if derivatives == 0:
            return (y,)
        g = np.einsum("pnc,pnr->pcr", x, out[1])
        return y, g

    def quadrature_jacobians(self, quad=None) -> np.ndarray:
        """``det grad Psi`` at the quadrature points of every element, (ne, nq)."""
        quad = quad or simplex_quadrature(2 * self.degree + 2)
        _, dl = self.basis.eval(quad.points)
        g = np.einsum("enc,qnr->eqcr", self.curved.nodes, dl)
        detg = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
        return detg / self.poly.tri.det[:, None]

    # -- global evaluation ---------------------------------------------
    def evaluate(self, points: np.ndarray, clamp: bool = False, located=None):
        """Evaluate ``Psi`` and its gradient at points of the polytope.

        Parameters
        ----------
        points : ndarray, shape (n, 2)
        clamp : bool
            Extrapolate from the nearest element for points slightly outside.
        located : tuple, optional
            Precomputed ``(elem, lam)`` from :meth:`TriMesh.locate`.

        Returns
        -------
        y : ndarray, shape (n, 2)
        grad : ndarray, shape (n, 2, 2)
            ``grad[p, i, j] = d y_i / d x_j``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if located is None:
            elem, lam, _ = self.poly.tri.locate(pts, clamp=clamp)
        else:
            elem, lam = located
        y, g = self.element_eval(elem, lam[:, 1:])
        grad = np.einsum("pcr,prj->pcj", g, self.poly.tri.jac_inv[elem])
        return y, grad

    def __call__(self, points):
        return self.evaluate(points)[0]

    @cached_property
    def _curved_tree(self):
        return cKDTree(self.curved.nodes.mean(axis=1))

    def inverse(self, points: np.ndarray, return_element: bool = False, clamp: bool = False):
        """Invert ``Psi`` by candidate search and damped Newton iterations.

        Parameters
        ----------
        clamp : bool
            Accept points slightly outside the curved domain: the Newton
            solution of the least-outside element is projected onto that
            element.

        Raises
        ------
        OutsideDomain
            A point lies outside every curved element (and ``clamp`` is off).
        NoConvergence
            Newton failed in every candidate element.
        """
        y = np.atleast_2d(np.asarray(points, dtype=float))
        n = y.shape[0]
        tri = self.poly.tri
        ne = tri.n_elements
        tol_res = 1e-13 * max(self.diameter, 1e-300)
        x_out = np.full((n, 2), np.nan)
        elem_out = np.full(n, -1, dtype=np.int64)
        best_lam = np.full(n, -np.inf)
        best_ref = np.zeros((n, 2))
        best_elem = np.full(n, -1, dtype=np.int64)

        # exact vertex hits map to themselves
        vdist, vidx = cKDTree(tri.vertices).query(y)
        hit = vdist <= 1e-14 * max(self.diameter, 1e-300)
        x_out[hit] = tri.vertices[vidx[hit]]
        if np.any(hit):
            elem_out[hit] = tri.vertex_elements[vidx[hit], 0]
        todo = np.flatnonzero(~hit)

        def attempt(idx, el):
            xr, ok, conv = self._newton(el, y[idx], tol_res)
            good = ok & conv
            x_out[idx[good]] = tri.origin[el[good]] + np.einsum("pij,pj->pi", tri.jac[el[good]], xr[good])
            elem_out[idx[good]] = el[good]
            out = np.flatnonzero(conv & ~ok)
            lam = np.minimum(xr[out].min(axis=1), 1.0 - xr[out].sum(axis=1))
            better = lam > best_lam[idx[out]]
            sel = idx[out][better]
            best_lam[sel] = lam[better]
            best_ref[sel] = xr[out][better]
            best_elem[sel] = el[out][better]

        if todo.size:
            kc = min(N_CANDIDATES, ne)
            _, cand = self._curved_tree.query(y[todo], k=kc)
            cand = np.asarray(cand).reshape(todo.size, kc)
            remaining = todo
            for r in range(kc):
                if remaining.size == 0:
                    break
                attempt(remaining, cand[np.searchsorted(todo, remaining), r])
                remaining = remaining[elem_out[remaining] < 0]
            # exhaustive fallback, batched
            if remaining.size and kc < ne:
                chunk = max(1, 200_000 // ne)
                for start in range(0, remaining.size, chunk):
                    part = remaining[start : start + chunk]
                    attempt(np.repeat(part, ne), np.tile(np.arange(ne), part.size))
                remaining = remaining[elem_out[remaining] < 0]
            if remaining.size:
                outside = best_elem[remaining] >= 0
                if clamp and np.all(outside):
                    ref = _project_reference(best_ref[remaining])
                    el = best_elem[remaining]
                    x_out[remaining] = tri.origin[el] + np.einsum("pij,pj->pi", tri.jac[el], ref)
                    elem_out[remaining] = el
                elif np.any(outside):
                    raise OutsideDomain(
                        f"{int(outside.sum())} point(s) outside the curved mesh, first {y[remaining[outside][0]].tolist()}"
                    )
                else:
                    raise NoConvergence(f"Newton inversion failed for {remaining.size} point(s)")
        if return_element:
            return x_out, elem_out
        return x_out

    def _newton(self, elem, y, tol_res):
        """Vectorised damped Newton iteration for ``Psi_k(xref) = y``."""
        m = y.shape[0]
        xr = np.full((m, 2), 1.0 / 3.0)
        conv = np.zeros(m, dtype=bool)
        active = np.ones(m, dtype=bool)
        for _ in range(MAX_NEWTON + 1):
            ids = np.flatnonzero(active)
            if ids.size == 0:
                break
            val, g = self.element_eval(elem[ids], xr[ids])
            res = val - y[ids]
            rn = np.hypot(res[:, 0], res[:, 1])
            done = rn <= tol_res
            conv[ids[done]] = True
            active[ids[done]] = False
            ids2 = ids[~done]
            if ids2.size == 0:
                break
            g2 = g[~done]
            r2 = res[~done]
            det = g2[:, 0, 0] * g2[:, 1, 1] - g2[:, 0, 1] * g2[:, 1, 0]
            sing = np.abs(det) < 1e-300
            det = np.where(sing, 1.0, det)
            step = -np.column_stack(
                [(g2[:, 1, 1] * r2[:, 0] - g2[:, 0, 1] * r2[:, 1]) / det,
                 (-g2[:, 1, 0] * r2[:, 0] + g2[:, 0, 0] * r2[:, 1]) / det]
            )
            step[sing] = 0.0
            active[ids2[sing]] = False
            t = np.ones(ids2.size)
            for _h in range(30):
                trial = xr[ids2] + t[:, None] * step
                outside = (trial.min(axis=1) < -0.5) | (trial.sum(axis=1) > 1.5)
                if not outside.any():
                    break
                t[outside] *= 0.5
            xr[ids2] = xr[ids2] + t[:, None] * step
        # one polishing step for converged points
        ids = np.flatnonzero(conv)
        if ids.size:
            val, g = self.element_eval(elem[ids], xr[ids])
            res = val - y[ids]
            sol = np.linalg.solve(g, res[..., None])[..., 0]
            xr[ids] -= sol
        lam_min = np.minimum(xr.min(axis=1), 1.0 - xr.sum(axis=1))
        inside = lam_min >= -TOL_LOC
        return xr, inside, conv

    # -- convenience ---------------------------------------------------
    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        return self.geometry.distance(points)


def _project_reference(xr: np.ndarray) -> np.ndarray:
    """Closest points of the reference triangle."""
    x = np.clip(xr, 0.0, None)
    over = x.sum(axis=1) > 1.0
    if np.any(over):
        # project onto the hypotenuse, then clip to its end points
        v = xr[over]
        t = np.clip(0.5 * (1.0 + v[:, 0] - v[:, 1]), 0.0, 1.0)
        x[over] = np.column_stack([t, 1.0 - t])
    return x


class BoundaryGeometry:
    """Boundary curves of a curved mesh, sampled for arc-length queries."""

    SAMPLES = 128

    def __init__(self, curved, tri, edges, edge_elements, edge_local, bnd_edges, basis, angle_tol=ANGLE_TOL):
        self.angle_tol = angle_tol
        self.curved = curved
        self.basis = basis
        scale = max(curved.diameter, 1e-300)
        self.scale = scale
        # directed facets (start vertex, end vertex) with the domain on the left
        self.facets = []
        for eid in bnd_edges:
            e, f = int(edge_elements[eid, 0]), int(edge_local[eid, 0])
            a, b = tri.triangles[e, f], tri.triangles[e, (f + 1) % 3]
            self.facets.append((e, f, int(a), int(b), int(eid)))
        t = np.linspace(0.0, 1.0, self.SAMPLES + 1)
        self._t = t
        nb = len(self.facets)
        self.samples = np.empty((nb, t.size, 2))
        self.start_tangent = np.empty((nb, 2))
        self.end_tangent = np.empty((nb, 2))
        sag = 0.0
        tm = 0.5 * (t[1:] + t[:-1])
        for i, (e, f, _, _, _) in enumerate(self.facets):
            self.samples[i] = self.curve(i, t)
            d = self.curve_derivative(i, np.array([0.0, 1.0]))
            self.start_tangent[i] = d[0] / np.hypot(*d[0])
            self.end_tangent[i] = d[1] / np.hypot(*d[1])
            mids = self.curve(i, tm)
            chord_mid = 0.5 * (self.samples[i, 1:] + self.samples[i, :-1])
            sag = max(sag, float(np.max(np.hypot(*(mids - chord_mid).T))))
        self.sag = sag
        self.on_boundary_tol = 1e-6 * scale + 2.0 * sag
        self._build_loops()

    def curve(self, i: int, t: np.ndarray) -> np.ndarray:
        e, f = self.facets[i][:2]
        ref = _edge_reference_points(f, t)
        (vals,) = self.basis.eval(ref, derivatives=0)
        return vals @ self.curved.nodes[e]

    def curve_derivative(self, i: int, t: np.ndarray) -> np.ndarray:
        e, f = self.facets[i][:2]
        ref = _edge_reference_points(f, t)
        _, d = self.basis.eval(ref)
        g = np.einsum("nc,pnr->pcr", self.curved.nodes[e], d)
        return g @ _EDGE_DIRECTION[f]

    def _build_loops(self):
        nb = len(self.facets)
        by_start = {}
        for i, fc in enumerate(self.facets):
            by_start[fc[2]] = i
        seen = np.zeros(nb, dtype=bool)
        self.loops = []
        for i0 in range(nb):
            if seen[i0]:
                continue
            loop = []
            i = i0
            while not seen[i]:
                seen[i] = True
                loop.append(i)
                nxt = by_start.get(self.facets[i][3])
                if nxt is None:
                    raise InadmissibleMesh("open boundary chain")
                i = nxt
            self.loops.append(loop)
        self.facet_loop = np.zeros(nb, dtype=np.int64)
        self.facet_offset = np.zeros(nb)
        self.loop_length = []
        self.loop_angular = []
        angular_vertices = []
        seg_len = np.hypot(*np.diff(self.samples, axis=1).transpose(2, 0, 1))
        self._cum = np.concatenate([np.zeros((nb, 1)), np.cumsum(seg_len, axis=1)], axis=1)
        for li, loop in enumerate(self.loops):
            s = 0.0
            angles = []
            for pos, i in enumerate(loop):
                self.facet_loop[i] = li
                self.facet_offset[i] = s
                prev = loop[pos - 1]
                c = float(np.clip(np.dot(self.end_tangent[prev], self.start_tangent[i]), -1.0, 1.0))
                cr = self.end_tangent[prev][0] * self.start_tangent[i][1] - self.end_tangent[prev][1] * self.start_tangent[i][0]
                if abs(math.atan2(cr, c)) > self.angle_tol:
                    angles.append(s)
                    angular_vertices.append(self.facets[i][2])
                s += self._cum[i, -1]
            self.loop_length.append(s)
            self.loop_angular.append(np.array(sorted(angles)))
        self.angular_vertices = np.array(sorted(set(angular_vertices)), dtype=np.int64)
        flat = self.samples[:, :-1].reshape(-1, 2)
        self._tree = cKDTree(flat)

    # -- queries ---------------------------------------------------------
    def project(self, points: np.ndarray):
        """Project points onto the sampled boundary polyline.

        Returns facet index, local parameter ``t`` and distance.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nseg = self.SAMPLES
        _, idx = self._tree.query(pts, k=min(4, self._tree.n))
        idx = np.atleast_2d(idx).reshape(len(pts), -1)
        best_d = np.full(len(pts), np.inf)
        best_f = np.zeros(len(pts), dtype=np.int64)
        best_t = np.zeros(len(pts))
        for col in range(idx.shape[1]):
            for shift in (-1, 0):
                flat = idx[:, col]
                fac = flat // nseg
                s = flat % nseg + shift
                ok = s >= 0
                s = np.where(ok, s, 0)
                a = self.samples[fac, s]
                b = self.samples[fac, s + 1]
                ab = b - a
                den = np.maximum(np.einsum("pi,pi->p", ab, ab), 1e-300)
                u = np.clip(np.einsum("pi,pi->p", pts - a, ab) / den, 0.0, 1.0)
                proj = a + u[:, None] * ab
                d = np.hypot(*(pts - proj).T)
                d = np.where(ok, d, np.inf)
                better = d < best_d
                best_d[better] = d[better]
                best_f[better] = fac[better]
                best_t[better] = self._t[s[better]] + u[better] * (self._t[1] - self._t[0])
        return best_f, best_t, best_d

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the curved boundary, refined by Gauss-Newton on each curve."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fac, t, d = self.project(pts)
        out = d.copy()
        for i in np.unique(fac):
            sel = np.flatnonzero(fac == i)
            tt = t[sel].copy()
            for _ in range(20):
                g = self.curve(i, tt)
                dg = self.curve_derivative(i, tt)
                r = g - pts[sel]
                step = np.einsum("pi,pi->p", r, dg) / np.einsum("pi,pi->p", dg, dg)
                tt = np.clip(tt - step, 0.0, 1.0)
                if np.max(np.abs(step)) < 1e-15:
                    break
            out[sel] = np.minimum(out[sel], np.hypot(*(self.curve(i, tt) - pts[sel]).T))
        return out

    def arc_position(self, points: np.ndarray):
        """Loop index and arc-length coordinate of boundary points."""
        fac, t, d = self.project(points)
        if np.any(d > self.on_boundary_tol):
            bad = int(np.argmax(d))
            raise PointNotOnBoundary(f"point {np.atleast_2d(points)[bad].tolist()} is {d[bad]:.3e} from the boundary")
        seg = np.minimum((t * self.SAMPLES).astype(np.int64), self.SAMPLES - 1)
        frac = t * self.SAMPLES - seg
        cum = self._cum[fac, seg] + frac * (self._cum[fac, seg + 1] - self._cum[fac, seg])
        return self.facet_loop[fac], self.facet_offset[fac] + cum

    def geodesic(self, x, y) -> float:
        """Arc length between two boundary points along a smooth boundary part.

        Returns ``inf`` when every boundary path between the points crosses an
        angular point or when they lie on different boundary components.
        """
        (lx, ly), (sx, sy) = self.arc_position(np.array([x, y], dtype=float))
        if lx != ly:
            return math.inf
        length = self.loop_length[lx]
        ang = self.loop_angular[lx]
        tol = 1e-9 * self.scale
        if ang.size == 0:
            dd = abs(sx - sy)
            return float(min(dd, length - dd))
        # shift so that the first angular point sits at 0
        sx = (sx - ang[0]) % length
        sy = (sy - ang[0]) % length
        cuts = np.concatenate([ang - ang[0], [length]])
        best = math.inf
        for i in range(cuts.size - 1):
            lo, hi = cuts[i], cuts[i + 1]

            def inside(s):
                cands = [s]
                if s < tol:
                    cands.append(length)
                if length - s < tol:
                    cands.append(0.0)
                return [c for c in cands if lo - tol <= c <= hi + tol]

            for a in inside(sx):
                for b in inside(sy):
                    best = min(best, abs(a - b))
        return float(best)


@dataclass
class HypothesisReport:
    """Result of the admissibility checks on a polytope/map pair."""

    vertex_error: float
    min_jacobian: float
    linear_facet_error: float
    angular_in_vertices: bool
    n_polytope_vertices: int
    n_angular: int
    n_fictitious: int

    @property
    def ok(self) -> bool:
        return (
            self.vertex_error == 0.0
            and self.min_jacobian > 0.0
            and self.linear_facet_error <= 1e-12
            and self.angular_in_vertices
        )

    def to_json(self) -> dict:
        return {
            "ok": bool(self.ok),
            "vertex_error": self.vertex_error,
            "min_jacobian": self.min_jacobian,
            "linear_facet_error": self.linear_facet_error,
            "angular_in_vertices": bool(self.angular_in_vertices),
            "n_polytope_vertices": self.n_polytope_vertices,
            "n_angular": self.n_angular,
            "n_fictitious": self.n_fictitious,
        }


def check_hypothesis(gm: GeometricMap) -> HypothesisReport:
    """Check vertex identity, Jacobian positivity and straight-facet identity."""
    pm = gm.poly
    verts = pm.vertices
    y = gm(verts)
    verr = float(np.max(np.abs(y - verts)))
    jmin = float(gm.quadrature_jacobians().min())
    k = gm.degree
    slices = edge_node_slices(k)
    t = np.linspace(0.0, 1.0, 11)
    worst = 0.0
    for eid in pm.boundary_edge_ids:
        e, f = pm.edge_elements[eid, 0], pm.edge_local[eid, 0]
        nodes = gm.curved.nodes[e, slices[f]]
        a, b = nodes[0], nodes[-1]
        lin = a + np.linspace(0.0, 1.0, k + 1)[:, None] * (b - a)
        if np.max(np.abs(nodes - lin)) <= 1e-12 * gm.diameter:
            pts = a + t[:, None] * (b - a)
            worst = max(worst, float(np.max(np.abs(gm(pts) - pts))))
    ang_ok = set(pm.angular_vertices.tolist()) <= set(pm.polytope_vertices.tolist())
    return HypothesisReport(
        vertex_error=verr,
        min_jacobian=jmin,
        linear_facet_error=worst,
        angular_in_vertices=ang_ok,
        n_polytope_vertices=int(pm.polytope_vertices.size),
        n_angular=int(pm.angular_vertices.size),
        n_fictitious=int(pm.fictitious_vertices.size),
    )


def constant_C(gm1: GeometricMap, gm2: GeometricMap) -> float:
    """Smallest boundary distance between fictitious vertices of two polytopes
    and between distinct vertices of each polytope.

    Both maps must describe the same curved domain; distances are measured on
    the boundary of the first one.
    """
    geo = gm1.geometry
    v1 = gm1.poly.vertices[gm1.poly.polytope_vertices]
    v2 = gm2.poly.vertices[gm2.poly.polytope_vertices]
    f1 = gm1.poly.vertices[gm1.poly.fictitious_vertices]
    f2 = gm2.poly.vertices[gm2.poly.fictitious_vertices]
    best = math.inf
    for p in f1:
        for q in f2:
            best = min(best, geo.geodesic(p, q))
    for vs in (v1, v2):
        for i in range(len(vs)):
            for j in range(i + 1, len(vs)):
                best = min(best, geo.geodesic(vs[i], vs[j]))
    return best


@dataclass
class DeformedMeshReport:
    """Per-element quality of a deformed high-order mesh."""

    nodes: np.ndarray
    quality: np.ndarray
    quality_id: np.ndarray
    ratio: np.ndarray
    min_det: float
    flagged: np.ndarray

    @property
    def element_ratio(self) -> np.ndarray:
        return self.ratio.max(axis=1)


def mesh_quality(grad: np.ndarray):
    """Anisotropy measure ``(|G|_F^2 / det_+ )^2 / 4`` of 2x2 gradients.

    Returns the quality, the determinant and a mask of degenerate entries,
    for which the quality is set to a large cap.
    """
    g = np.asarray(grad)
    fro = np.einsum("...ij,...ij->...", g, g)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    bad = det <= 1e-14 * np.maximum(fro, 1e-300)
    safe = np.where(bad, 1.0, det)
    q = 0.25 * (fro / safe) ** 2
    q = np.where(bad, QUALITY_CAP, q)
    return q, det, bad


def deformed_quality(pb_mesh: CurvedMesh, node_images: np.ndarray, quad=None) -> DeformedMeshReport:
    """Quality ratios of a deformed mesh relative to the undeformed one.

    Parameters
    ----------
    pb_mesh : CurvedMesh
        The undeformed (high-fidelity) mesh.
    node_images : ndarray, shape (ne, n_lp, 2)
        Images of its element nodes under the deformation.
    """
    imgs = np.asarray(node_images, dtype=float)
    k = pb_mesh.degree
    quad = quad or simplex_quadrature(max(2, 2 * k))
    _, dl = nodal_basis(k).eval(quad.points)
    g_id = np.einsum("enc,qnr->eqcr", pb_mesh.nodes, dl)
    g = np.einsum("enc,qnr->eqcr", imgs, dl)
    q_id, _, _ = mesh_quality(g_id)
    q, det, bad = mesh_quality(g)
    return DeformedMeshReport(
        nodes=imgs,
        quality=q,
        quality_id=q_id,
        ratio=q / q_id,
        min_det=float(det.min()),
        flagged=bad.any(axis=1),
    )
