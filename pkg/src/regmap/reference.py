"""Reference triangle machinery.

The master element is ``D = {x1 > 0, x2 > 0, x1 + x2 < 1}``.  Everything here
is independent of any mesh: lattice nodes, an orthonormal modal basis, the
nodal (Lagrange) basis built on top of it, quadrature and 1D Gauss-Lobatto
points.

Node ordering
-------------
``lattice_nodes`` returns the three vertices ``(0,0), (1,0), (0,1)``, then the
interior nodes of edge 0 (v0 -> v1), edge 1 (v1 -> v2) and edge 2 (v2 -> v0)
walked counter-clockwise, then the element-interior nodes sorted by ``x2``
first and ``x1`` second.  Local edge ``e`` joins local vertices ``e`` and
``(e + 1) % 3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

__all__ = [
    "lattice_indices",
    "lattice_nodes",
    "edge_node_slices",
    "jacobi_normalized",
    "modal_basis",
    "NodalBasis",
    "nodal_basis",
    "QuadratureRule",
    "simplex_quadrature",
    "gauss_legendre_01",
    "gauss_lobatto",
]

REF_AREA = 0.5


def lattice_indices(degree: int) -> np.ndarray:
    """Integer lattice coordinates ``(i, j)`` of the degree-``degree`` nodes.

    The node ``(i, j)`` sits at ``(i / degree, j / degree)``.
    """
    k = int(degree)
    if k < 1:
        raise ValueError("degree must be >= 1")
    idx = [(0, 0), (k, 0), (0, k)]
    idx += [(i, 0) for i in range(1, k)]
    idx += [(k - i, i) for i in range(1, k)]
    idx += [(0, k - i) for i in range(1, k)]
    for j in range(1, k):
        for i in range(1, k - j):
            idx.append((i, j))
    return np.array(idx, dtype=np.int64)


def lattice_nodes(degree: int) -> np.ndarray:
    """Regular lattice nodes on the reference triangle, shape ``(n_lp, 2)``."""
    return lattice_indices(degree) / float(degree)


def edge_node_slices(degree: int) -> list[np.ndarray]:
    """Local node indices on each reference edge, ordered from its start vertex.

    Entry ``e`` lists ``degree + 1`` indices: local vertex ``e``, the
    edge-interior nodes, and local vertex ``(e + 1) % 3``.
    """
    k = degree
    out = []
    for e in range(3):
        inner = list(range(3 + e * (k - 1), 3 + (e + 1) * (k - 1)))
        out.append(np.array([e] + inner + [(e + 1) % 3], dtype=np.int64))
    return out


def jacobi_normalized(x: np.ndarray, alpha: float, beta: float, n: int):
    """Orthonormal Jacobi polynomials ``P_0..P_n`` and their derivatives.

    Normalised so that ``int_{-1}^{1} P_i P_j (1-x)^alpha (1+x)^beta = delta_ij``.

    Returns
    -------
    values, derivs : ndarray, shape ``(n + 1, len(x))``
    """
    x = np.asarray(x, dtype=float)
    p = _jacobi_values(x, alpha, beta, n)
    dp = np.zeros_like(p)
    if n >= 1:
        q = _jacobi_values(x, alpha + 1.0, beta + 1.0, n - 1)
        for i in range(1, n + 1):
            dp[i] = math.sqrt(i * (i + alpha + beta + 1.0)) * q[i - 1]
    return p, dp


def _jacobi_values(x, alpha, beta, n):
    # three-term recurrence for the normalised polynomials
    out = np.zeros((n + 1,) + x.shape)
    ab = alpha + beta
    g0 = 2.0 ** (ab + 1) / (ab + 1) * math.gamma(alpha + 1) * math.gamma(beta + 1) / math.gamma(ab + 1)
    out[0] = 1.0 / math.sqrt(g0)
    if n == 0:
        return out
    g1 = (alpha + 1) * (beta + 1) / (ab + 3) * g0
    out[1] = ((ab + 2) * x / 2 + (alpha - beta) / 2) / math.sqrt(g1)
    a_old = 2.0 / (2 + ab) * math.sqrt((alpha + 1) * (beta + 1) / (ab + 3))
    for i in range(1, n):
        h1 = 2 * i + ab
        a_new = 2.0 / (h1 + 2) * math.sqrt(
            (i + 1) * (i + 1 + ab) * (i + 1 + alpha) * (i + 1 + beta) / (h1 + 1) / (h1 + 3)
        )
        b_new = -(alpha**2 - beta**2) / h1 / (h1 + 2)
        out[i + 1] = ((x - b_new) * out[i] - a_old * out[i - 1]) / a_new
        a_old = a_new
    return out


def _mode_indices(degree: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(degree + 1) for j in range(degree + 1 - i)]


def modal_basis(degree: int, points: np.ndarray):
    """Orthonormal (Koornwinder/Dubiner) basis on the reference triangle.

    Parameters
    ----------
    degree : int
        Total polynomial degree.
    points : ndarray, shape (n, 2)
        Query points in reference coordinates.

    Returns
    -------
    psi : ndarray, shape (n, n_lp)
        Mode values; the constant mode equals ``sqrt(2)``.
    dpsi : ndarray, shape (n, n_lp, 2)
        Gradients with respect to the reference coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    # biunit coordinates and collapsed coordinates
    r = 2.0 * x - 1.0
    s = 2.0 * y - 1.0
    denom = 1.0 - s
    top = np.abs(denom) < 1e-14
    a = np.where(top, -1.0, 2.0 * (1.0 + r) / np.where(top, 1.0, denom) - 1.0)
    b = s
    pa, dpa = jacobi_normalized(a, 0.0, 0.0, degree)
    modes = _mode_indices(degree)
    psi = np.empty((pts.shape[0], len(modes)))
    dpsi = np.empty((pts.shape[0], len(modes), 2))
    half = 0.5 * (1.0 - b)
    cache = {}
    for m, (i, j) in enumerate(modes):
        if i not in cache:
            cache[i] = jacobi_normalized(b, 2.0 * i + 1.0, 0.0, degree - i)
        pb, dpb = cache[i]
        fa, dfa = pa[i], dpa[i]
        gb, dgb = pb[j], dpb[j]
        scale = 2.0 ** (i + 0.5)
        psi[:, m] = scale * fa * gb * half**i
        if i > 0:
            hm1 = half ** (i - 1)
        else:
            hm1 = np.zeros_like(half)
        ddr = dfa * gb * (hm1 if i > 0 else 1.0)
        dds = dfa * gb * 0.5 * (1.0 + a) * (hm1 if i > 0 else 1.0)
        tmp = dgb * half**i
        if i > 0:
            tmp = tmp - 0.5 * i * gb * hm1
        dds = dds + fa * tmp
        # biunit -> unit triangle: psi_unit = 2 psi_biunit, d/dx = 2 d/dr
        psi[:, m] *= 2.0
        dpsi[:, m, 0] = 4.0 * scale * ddr
        dpsi[:, m, 1] = 4.0 * scale * dds
    return psi, dpsi


@dataclass(frozen=True)
class NodalBasis:
    """Lagrange basis on the regular lattice, represented through the modal basis.

    Attributes
    ----------
    degree : int
    nodes : ndarray, shape (n_lp, 2)
    vandermonde : ndarray, shape (n_lp, n_lp)
        ``V[i, m] = psi_m(node_i)``.
    inv_vandermonde : ndarray
    dmat : ndarray, shape (2, n_lp, n_lp)
        Differentiation matrices acting on nodal values.
    """

    degree: int
    nodes: np.ndarray
    vandermonde: np.ndarray
    inv_vandermonde: np.ndarray
    dmat: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def _snap(self, pts):
        # exact Kronecker rows for points that coincide with lattice nodes
        k = self.degree
        scaled = pts * k
        near = np.abs(scaled - np.round(scaled)).max(axis=1) < 1e-12
        hits = {}
        if np.any(near):
            lookup = {tuple(v): n for n, v in enumerate(lattice_indices(k).tolist())}
            for p in np.flatnonzero(near):
                key = tuple(int(v) for v in np.round(scaled[p]))
                if key in lookup:
                    hits[p] = lookup[key]
        return hits

    def eval(self, points: np.ndarray, derivatives: int = 1):
        """Evaluate the nodal basis at reference points.

        Parameters
        ----------
        points : ndarray, shape (n, 2)
        derivatives : {0, 1, 2}
            Highest derivative order to return.

        Returns
        -------
        tuple
            ``(values,)``, ``(values, grads)`` or ``(values, grads, hessians)``
            with shapes ``(n, n_lp)``, ``(n, n_lp, 2)`` and ``(n, n_lp, 3)``.
            Hessian components are ordered ``(xx, xy, yy)``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        psi, dpsi = modal_basis(self.degree, pts)
        vals = psi @ self.inv_vandermonde
        for p, n in self._snap(pts).items():
            vals[p] = 0.0
            vals[p, n] = 1.0
        if derivatives == 0:
            return (vals,)
        gx = dpsi[:, :, 0] @ self.inv_vandermonde
        gy = dpsi[:, :, 1] @ self.inv_vandermonde
        grads = np.stack([gx, gy], axis=-1)
        if derivatives == 1:
            return vals, grads
        dx, dy = self.dmat
        hxx = gx @ dx
        hxy = gx @ dy
        hyy = gy @ dy
        return vals, grads, np.stack([hxx, hxy, hyy], axis=-1)

    def interpolate(self, nodal_values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the interpolant with the given nodal values at ``points``."""
        (vals,) = self.eval(points, derivatives=0)
        return vals @ nodal_values


@lru_cache(maxsize=None)
def nodal_basis(degree: int) -> NodalBasis:
    """Build (and cache) the nodal basis of the given degree."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    nodes = lattice_nodes(degree)
    psi, dpsi = modal_basis(degree, nodes)
    cond = np.linalg.cond(psi)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"singular Vandermonde (cond={cond:.3e})")
    inv_v = np.linalg.inv(psi)
    dmat = np.stack([dpsi[:, :, 0] @ inv_v, dpsi[:, :, 1] @ inv_v])
    for arr in (nodes, psi, inv_v, dmat):
        arr.setflags(write=False)
    return NodalBasis(degree, nodes, psi, inv_v, dmat)


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle (weights sum to 1/2)."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


def _radau_left_weighted(n: int):
    """Gauss-Radau rule on [-1, 1] for the weight ``1 - v``, node fixed at -1."""
    if n == 1:
        return np.array([-1.0]), np.array([2.0])
    inner, _ = roots_jacobi(n - 1, 1.0, 1.0)
    nodes = np.concatenate([[-1.0], np.sort(inner)])
    # moments of (1 - v) against Legendre polynomials: only P0 and P1 survive
    vand = legendre.legvander(nodes, n - 1).T
    moments = np.zeros(n)
    moments[0] = 2.0
    moments[1] = -2.0 / 3.0
    weights = np.linalg.solve(vand, moments)
    return nodes, weights


@lru_cache(maxsize=None)
def simplex_quadrature(q: int) -> QuadratureRule:
    """Collapsed-coordinate rule exact for total degree ``q``.

    A Gauss-Legendre rule in the first collapsed direction is paired with a
    Gauss-Radau rule (weight ``1 - v``, endpoint ``v = -1``) in the second,
    so no point lands on the collapsed vertex.
    """
    if q < 1:
        raise ValueError("quadrature degree must be >= 1")
    nu = (q + 2) // 2  # 2 nu - 1 >= q
    nv = (q + 3) // 2  # 2 nv - 2 >= q
    gu, wu = legendre.leggauss(nu)
    gv, wv = _radau_left_weighted(nv)
    uu, vv = np.meshgrid(gu, gv, indexing="ij")
    ww = np.outer(wu, wv) / 8.0
    x = 0.25 * (1.0 + uu) * (1.0 - vv)
    y = 0.5 * (1.0 + vv)
    pts = np.column_stack([x.ravel(), y.ravel()])
    w = ww.ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, int(q))


def gauss_legendre_01(n: int):
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_lobatto(n: int) -> np.ndarray:
    """Gauss-Lobatto points on [0, 1], endpoints included."""
    if n < 2:
        raise ValueError("need at least two Gauss-Lobatto points")
    if n == 2:
        return np.array([0.0, 1.0])
    c = np.zeros(n)
    c[-1] = 1.0
    inner = np.sort(np.real(legendre.legroots(legendre.legder(c))))
    t = np.concatenate([[-1.0], inner, [1.0]])
    # symmetrise against root-finding noise
    t = 0.5 * (t - t[::-1])
    return 0.5 * (t + 1.0)
