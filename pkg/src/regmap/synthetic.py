"""Synthetic geometries, parametric fields and analytic maps used by the
experiments, the CLI ``synth`` command and the tests."""

from __future__ import annotations

import math

import numpy as np

from .mesh import BoundaryFacet, CurvedMesh, TriMesh
from .reference import lattice_nodes

__all__ = [
    "blended_curved_mesh",
    "structured_triangles",
    "semicircle_mesh",
    "semicircle_polytope",
    "SEMICIRCLE_A",
    "SEMICIRCLE_B",
    "bump_height",
    "bump_channel_mesh",
    "bump_channel_p1",
    "rectangle_mesh",
    "front_center",
    "front_field",
    "wake_field",
    "phi1",
    "phi1_inverse",
    "phi2",
    "phi2_mirror",
    "counterexample_map",
    "pushforward_mesh",
    "two_point_profile_mesh",
]


def blended_curved_mesh(vertices, triangles, degree, curves=None, tags=None, periodic_pairs=()):
    """Curved mesh whose boundary edges follow prescribed curves.

    Each curved edge ``(a, b)`` carries a map ``gamma(s)``, ``s`` in [0, 1],
    with ``gamma(0) = x_a`` and ``gamma(1) = x_b``.  Element nodes are placed by
    adding, for every curved edge of the element, the blended correction
    ``(la + lb) * (gamma(s) - chord(s))`` with ``s = lb / (la + lb)``.

    Parameters
    ----------
    tags : callable, optional
        ``tags(a, b) -> str`` for boundary edges; default ``"boundary"``.
    """
    verts = np.asarray(vertices, dtype=float)
    tri = np.asarray(triangles, dtype=np.int64)
    curves = dict(curves or {})
    ref = lattice_nodes(degree)
    lam = np.column_stack([1.0 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]])
    nodes = np.empty((tri.shape[0], ref.shape[0], 2))
    for e, t in enumerate(tri):
        x = verts[t]
        pos = lam @ x
        for f in range(3):
            ia, ib = int(t[f]), int(t[(f + 1) % 3])
            if (ia, ib) in curves:
                gamma = curves[(ia, ib)]
            elif (ib, ia) in curves:
                g = curves[(ib, ia)]

                def gamma(s, g=g):
                    return g(1.0 - np.asarray(s))

            else:
                continue
            la, lb = lam[:, f], lam[:, (f + 1) % 3]
            tot = la + lb
            on = tot > 1e-14
            s = np.where(on, lb / np.where(on, tot, 1.0), 0.0)
            g = np.asarray(gamma(s), dtype=float)
            chord = (1.0 - s)[:, None] * x[f] + s[:, None] * x[(f + 1) % 3]
            pos = pos + np.where(on[:, None], tot[:, None] * (g - chord), 0.0)
        pos[:3] = x
        nodes[e] = pos
    edges = {}
    for e, t in enumerate(tri):
        for f in range(3):
            key = tuple(sorted((int(t[f]), int(t[(f + 1) % 3]))))
            edges.setdefault(key, []).append((e, f))
    facets = []
    for key in sorted(edges):
        owners = edges[key]
        if len(owners) == 1:
            e, f = owners[0]
            a, b = int(tri[e, f]), int(tri[e, (f + 1) % 3])
            facets.append(BoundaryFacet(e, f, tags(a, b) if tags else "boundary"))
    return CurvedMesh(degree, nodes, tuple(facets), tuple(periodic_pairs))


def structured_triangles(nx: int, ny: int):
    """Vertex grid indices and CCW triangles of an ``nx`` by ``ny`` cell grid."""
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return tris


def rectangle_mesh(nx, ny, x0=0.0, x1=1.0, y0=0.0, y1=1.0) -> TriMesh:
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    return TriMesh(np.column_stack([X.ravel(), Y.ravel()]), structured_triangles(nx, ny))


# -- semicircle -----------------------------------------------------------

SEMICIRCLE_A = np.array([math.cos(math.radians(30.0)), math.sin(math.radians(30.0))])
SEMICIRCLE_B = np.array([math.cos(math.radians(53.0)), math.sin(math.radians(53.0))])


def _arc(theta0, theta1, radius=1.0):
    def gamma(s):
        th = theta0 + (theta1 - theta0) * np.asarray(s, dtype=float)
        return radius * np.column_stack([np.cos(th), np.sin(th)])

    return gamma


def semicircle_mesh(degree: int = 4, inner_height: float = 0.45) -> CurvedMesh:
    """Upper unit half-disk meshed by four curved triangles.

    Vertices: (-1,0), (0,0), (1,0), (0,1) and an inner vertex (0, h).  The
    two arc edges are exact circle arcs sampled uniformly in angle.
    """
    verts = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, inner_height]])
    tris = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    curves = {(2, 3): _arc(0.0, math.pi / 2), (3, 0): _arc(math.pi / 2, math.pi)}

    def tag(a, b):
        return "arc" if {a, b} in ({2, 3}, {3, 0}) else "base"

    return blended_curved_mesh(verts, tris, degree, curves, tag)


def semicircle_polytope(n_samples: int = 257):
    """Straight version of :func:`semicircle_mesh` for morphing tests.

    Returns the P1 mesh, ``n_samples`` points on the unit upper semicircle and
    the bindings of its two arc facets to that curve.
    """
    verts = np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.45]])
    tris = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    th = np.linspace(0.0, math.pi, n_samples)
    arc = np.column_stack([np.cos(th), np.sin(th)])
    return CurvedMesh.from_linear(verts, tris, 1), arc, {0: [(2, 0), (3, 0)]}


def two_point_profile_mesh(degree: int = 3, thickness: float = 0.15) -> CurvedMesh:
    """Rectangle with a thin profile hole meshed with only two profile vertices.

    The upper and lower profile arcs join the same two vertices, so their
    straight versions coincide and the mesh cannot be linearised.
    """
    verts = np.array([[-2.0, -1.0], [2.0, -1.0], [2.0, 1.0], [-2.0, 1.0], [-0.5, 0.0], [0.5, 0.0]])
    tris = np.array([[4, 5, 2], [4, 2, 3], [3, 0, 4], [5, 4, 0], [5, 0, 1], [1, 2, 5]])

    def upper(s):
        s = np.asarray(s, dtype=float)
        return np.column_stack([-0.5 + s, thickness * np.sin(np.pi * s)])

    def lower(s):
        s = np.asarray(s, dtype=float)
        return np.column_stack([0.5 - s, -thickness * np.sin(np.pi * s)])

    return blended_curved_mesh(verts, tris, degree, {(4, 5): upper, (5, 4): lower})


# -- bump channel -----------------------------------------------------------

BUMP_AMPLITUDE = 0.2
CHANNEL_LENGTH = 2.0


def bump_height(x):
    return 1.0 + BUMP_AMPLITUDE * np.sin(np.pi * np.asarray(x) / CHANNEL_LENGTH)


def _top_curve(s):
    x = CHANNEL_LENGTH * (1.0 - np.asarray(s, dtype=float))
    return np.column_stack([x, bump_height(x)])


def bump_channel_mesh(degree: int = 6, nx: int = 1) -> CurvedMesh:
    """Channel ``[0, 2] x [0, h(x)]`` with a sinusoidal upper wall.

    ``nx = 1`` gives a fan of four triangles around (1, 0.5); larger values
    give ``nx`` fans side by side.
    """
    xs = np.linspace(0.0, CHANNEL_LENGTH, nx + 1)
    verts = [[x, 0.0] for x in xs] + [[x, 1.0] for x in xs]
    centers = []
    tris = []
    n = nx + 1
    for i in range(nx):
        c = len(verts) + len(centers)
        centers.append([0.5 * (xs[i] + xs[i + 1]), 0.5])
        b0, b1, t0, t1 = i, i + 1, n + i, n + i + 1
        tris += [[b0, b1, c], [b1, t1, c], [t1, t0, c], [t0, b0, c]]
    verts = np.array(verts + centers)
    # top vertices sit on the curve
    verts[n : 2 * n, 1] = bump_height(verts[n : 2 * n, 0])
    curves = {}
    for i in range(nx):
        x0, x1 = xs[i + 1], xs[i]
        t1, t0 = n + i + 1, n + i

        def gamma(s, x0=x0, x1=x1):
            x = x0 + (x1 - x0) * np.asarray(s, dtype=float)
            return np.column_stack([x, bump_height(x)])

        curves[(t1, t0)] = gamma

    def tag(a, b):
        ya, yb = verts[a, 1], verts[b, 1]
        xa, xb = verts[a, 0], verts[b, 0]
        if ya == 0.0 and yb == 0.0:
            return "bottom"
        if xa == xb == 0.0:
            return "inlet"
        if xa == xb == CHANNEL_LENGTH:
            return "outlet"
        return "top"

    # straight interior vertices: keep the linear placement for non-curved edges
    return blended_curved_mesh(verts, np.array(tris), degree, curves, tag)


def bump_channel_p1(nx: int = 40, ny: int = 20) -> CurvedMesh:
    """Structured P1 mesh of the curved channel (vertices on the upper wall)."""
    xs = np.linspace(0.0, CHANNEL_LENGTH, nx + 1)
    eta = np.linspace(0.0, 1.0, ny + 1)
    X, E = np.meshgrid(xs, eta)
    Y = E * bump_height(X)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    return CurvedMesh.from_linear(verts, structured_triangles(nx, ny), degree=1)


# -- parametric fields --------------------------------------------------------

FRONT_WIDTH = 0.08
FRONT_TILT = 0.2


def front_center(mu):
    return 0.7 + 0.6 * np.asarray(mu, dtype=float)


def front_field(points, mu, width: float = FRONT_WIDTH, tilt: float = FRONT_TILT):
    """Smoothed translating front ``tanh((x1 - c(mu) - tilt (x2 - 1/2)) / w)``."""
    p = np.atleast_2d(points)
    return np.tanh((p[:, 0] - front_center(mu) - tilt * (p[:, 1] - 0.5)) / width)


def wake_field(points, mu, origin=(0.0, 0.5), width: float = 0.06):
    """Gaussian wake emanating from ``origin`` at angle ``0.4 (mu - 1/2)`` rad."""
    p = np.atleast_2d(points) - np.asarray(origin)
    ang = 0.4 * (np.asarray(mu, dtype=float) - 0.5)
    nrm = np.array([-math.sin(ang), math.cos(ang)])
    dist = p @ nrm
    return np.exp(-0.5 * (dist / width) ** 2)


# -- a bijection of the square that moves a vertex ------------------------------

def phi1(x):
    """Piecewise linear bijection of the unit square onto the unit triangle."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lower = x[:, 0] < x[:, 1]
    out = np.empty_like(x)
    out[lower, 0] = 0.5 * x[lower, 0]
    out[lower, 1] = -0.5 * x[lower, 0] + x[lower, 1]
    up = ~lower
    out[up, 0] = x[up, 0] - 0.5 * x[up, 1]
    out[up, 1] = 0.5 * x[up, 1]
    return out


def phi1_inverse(y):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    lower = y[:, 0] < y[:, 1]
    out = np.empty_like(y)
    out[lower, 0] = 2.0 * y[lower, 0]
    out[lower, 1] = y[lower, 0] + y[lower, 1]
    up = ~lower
    out[up, 0] = y[up, 0] + y[up, 1]
    out[up, 1] = 2.0 * y[up, 1]
    return out


def phi2(x):
    """Smooth bijection of the unit triangle fixing its boundary setwise,
    sending (1/2, 1/2) to (3/4, 1/4)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = x[:, 0] * x[:, 1] * (1.5 - x[:, 0])
    return x + g[:, None] * np.array([1.0, -1.0])


def phi2_mirror(x):
    """Mirror image of :func:`phi2`; sends (1/2, 1/2) to (1/4, 3/4)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = x[:, 0] * x[:, 1] * (1.5 - x[:, 1])
    return x + g[:, None] * np.array([-1.0, 1.0])


def phi2_jacobian(x, mirror: bool = False):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if mirror:
        x = x[:, ::-1]
    x1, x2 = x[:, 0], x[:, 1]
    gx1 = x2 * (1.5 - 2.0 * x1)
    gx2 = x1 * (1.5 - x1)
    return 1.0 + gx1 - gx2


def counterexample_map(x, mirror: bool = False):
    """``phi1^{-1} o phi2 o phi1`` on the unit square."""
    inner = phi2_mirror if mirror else phi2
    return phi1_inverse(inner(phi1(x)))


def pushforward_mesh(gm, mesh: TriMesh) -> CurvedMesh:
    """Straight P1 mesh of the polytope pushed forward through ``Psi``."""
    y = gm.evaluate(mesh.vertices, clamp=True)[0]
    return CurvedMesh.from_linear(y, mesh.triangles, degree=1)
