"""Lagrangian model reduction on P1 snapshot meshes.

Snapshots are mapped to the reference configuration through ``Phi_mu``,
compressed by POD in the mass-lumped L2 inner product, regressed over the
parameter domain and mapped back through ``Phi_mu^{-1}``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh
from .registration import RegressorModel, rbf_fit, rbf_predict

__all__ = [
    "SnapshotSet",
    "map_snapshot",
    "map_snapshots",
    "boundary_mass",
    "pod_l2",
    "Rom",
    "build_rom",
    "predict",
    "relative_l2",
    "RomReport",
    "rom_errors",
    "compare",
]


@dataclass
class SnapshotSet:
    """Nodal values ``values[i]`` of ``u_{params[i]}`` on a P1 mesh."""

    mesh: TriMesh
    params: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.mesh.vertices.shape[0]:
            raise ValueError("snapshot length does not match the mesh node count")
        if self.values.shape[0] != len(self.params):
            raise ValueError("one snapshot per parameter is required")

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def from_function(cls, mesh: TriMesh, params, func):
        p = np.asarray(params, dtype=float)
        return cls(mesh, p, np.stack([func(mesh.vertices, mu) for mu in p]))


def map_snapshot(values, mesh: TriMesh, phi):
    """``u o Phi`` at the mesh nodes; returns values and the clamped count."""
    images = np.atleast_2d(phi(mesh.vertices))
    vals, _, n_clamped = mesh.interpolate(np.asarray(values, dtype=float), images, clamp=True)
    return vals, int(n_clamped)


def map_snapshots(snaps: SnapshotSet, maps, threads: int = 1):
    """Map every snapshot through its own map; returns a new set and the
    per-snapshot clamped counts."""
    def one(i):
        return map_snapshot(snaps.values[i], snaps.mesh, maps[i])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, range(len(snaps))))
    else:
        out = [one(i) for i in range(len(snaps))]
    vals = np.stack([o[0] for o in out])
    return SnapshotSet(snaps.mesh, snaps.params, vals), [o[1] for o in out]


def boundary_mass(mesh: TriMesh) -> np.ndarray:
    """Lumped 1D mass on the boundary edges (zero at interior nodes)."""
    edges = np.asarray(mesh.boundary_edges)
    m = np.zeros(mesh.vertices.shape[0])
    if edges.size == 0:
        return m
    ln = np.hypot(*(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]).T)
    np.add.at(m, edges[:, 0], 0.5 * ln)
    np.add.at(m, edges[:, 1], 0.5 * ln)
    return m


def pod_l2(U, mass, n: int):
    """First ``n`` POD modes of the rows of ``U`` in the inner product
    ``<u, v> = sum mass * u * v``; modes are mass-orthonormal rows.

    Returns the modes and all eigenvalues in decreasing order.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    w = np.asarray(mass, dtype=float)
    C = (U * w) @ U.T
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    V = V[:, order]
    n = min(n, U.shape[0])
    keep = lam[:n] > 1e-13 * max(lam[0], 1e-300)
    modes = (V[:, :n][:, keep].T @ U) / np.sqrt(lam[:n][keep])[:, None]
    # one Gram-Schmidt pass in the weighted product
    sw = np.sqrt(w)
    q, r = np.linalg.qr((modes * sw).T)
    sgn = np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    modes = (q * sgn).T / np.where(sw > 0, sw, 1.0)
    return modes, lam


@dataclass
class Rom:
    modes: np.ndarray
    mass: np.ndarray
    regressor: RegressorModel
    eigenvalues: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    def project(self, values) -> np.ndarray:
        c = (np.atleast_2d(values) * self.mass) @ self.modes.T
        return c @ self.modes

    def coefficients(self, mu) -> np.ndarray:
        return rbf_predict(self.regressor, mu)


def build_rom(mapped: SnapshotSet, n: int, mass=None, split: float = 1.0, r_min: float = 0.70, seed: int = 0) -> Rom:
    """POD of the mapped snapshots plus RBF regression of their coefficients.

    With the default ``split = 1`` the regression interpolates all snapshots
    and keeps every mode.
    """
    if n > len(mapped):
        raise ValueError("POD size exceeds the number of snapshots")
    mass = mapped.mesh.lumped_mass if mass is None else np.asarray(mass, dtype=float)
    modes, lam = pod_l2(mapped.values, mass, n)
    coeffs = (mapped.values * mass) @ modes.T
    reg = rbf_fit(mapped.params, coeffs, r_min=r_min, split=split, seed=seed)
    return Rom(modes, mass, reg, lam, list(reg.flags))


def pull_back(values, mesh: TriMesh, phi=None, preimages=None):
    """``v o Phi^{-1}`` at the mesh nodes for a field ``v`` in the reference
    configuration; ``phi`` must provide ``inverse`` unless the node
    preimages are passed."""
    pre = np.atleast_2d(phi.inverse(mesh.vertices)) if preimages is None else preimages
    vals, _, _ = mesh.interpolate(np.asarray(values, dtype=float), pre, clamp=True)
    return vals


def predict(rom: Rom, mu, mesh: TriMesh, phi=None) -> np.ndarray:
    """Reconstructed field at the mesh nodes for parameter ``mu``."""
    ref = np.atleast_1d(rom.coefficients(mu)) @ rom.modes
    return ref if phi is None else pull_back(ref, mesh, phi)


def relative_l2(u, uhat, mass) -> float:
    u = np.asarray(u, dtype=float)
    d = u - np.asarray(uhat, dtype=float)
    den = float(np.sum(mass * u * u))
    num = float(np.sum(mass * d * d))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return float(np.sqrt(num / den))


@dataclass
class RomReport:
    method: str
    n: list
    e_max: list
    e_max_bnd: list

    def to_json(self) -> dict:
        return {"method": self.method, "n": self.n, "E_max": self.e_max, "E_max_bnd": self.e_max_bnd}

    def rows(self):
        return [(self.method, n, e, b) for n, e, b in zip(self.n, self.e_max, self.e_max_bnd)]


def rom_errors(train: SnapshotSet, test: SnapshotSet, ns, maps_train=None, maps_test=None,
               mode: str = "projection", method: str | None = None) -> RomReport:
    """Maximum relative L2 errors over the test set for each POD size.

    ``mode="projection"`` projects the mapped test snapshots onto the POD
    space; ``mode="prediction"`` uses the regressed coefficients.  Without
    maps both pipelines act on the unmapped snapshots.
    """
    if mode not in ("projection", "prediction"):
        raise ValueError("mode must be 'projection' or 'prediction'")
    mesh = train.mesh
    mass = mesh.lumped_mass
    bmass = boundary_mass(mesh)
    mapped_train = map_snapshots(train, maps_train)[0] if maps_train is not None else train
    mapped_test = map_snapshots(test, maps_test)[0] if maps_test is not None else test
    pre = [np.atleast_2d(m.inverse(mesh.vertices)) for m in maps_test] if maps_test is not None else None
    e_max, e_bnd = [], []
    for n in ns:
        rom = build_rom(mapped_train, int(n), mass)
        errs, errs_b = [], []
        for i, mu in enumerate(test.params):
            if mode == "projection":
                ref = rom.project(mapped_test.values[i])[0]
            else:
                ref = np.atleast_1d(rom.coefficients(mu)) @ rom.modes
            uhat = pull_back(ref, mesh, preimages=pre[i]) if pre is not None else ref
            errs.append(relative_l2(test.values[i], uhat, mass))
            errs_b.append(relative_l2(test.values[i], uhat, bmass))
        e_max.append(float(max(errs)))
        e_bnd.append(float(max(errs_b)))
    label = method or (("registered" if maps_test is not None else "linear") + "-" + mode)
    return RomReport(label, [int(n) for n in ns], e_max, e_bnd)


def compare(train: SnapshotSet, test: SnapshotSet, ns, maps_train, maps_test):
    """Registered and unmapped pipelines on identical data, both modes."""
    out = []
    for mode in ("projection", "prediction"):
        out.append(rom_errors(train, test, ns, maps_train, maps_test, mode))
        out.append(rom_errors(train, test, ns, None, None, mode))
    return out
