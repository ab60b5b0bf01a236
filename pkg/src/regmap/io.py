"""File formats: meshes, nodal fields, manifests, point sets, curves and
registration states.  JSON is written with sorted keys so that repeated runs
produce identical bytes."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import InadmissibleMesh, RegmapError
from .mesh import CurvedMesh
from .morph import Polyline

__all__ = [
    "InputError",
    "dump_json",
    "load_json",
    "read_mesh",
    "write_mesh",
    "read_nodal_csv",
    "write_nodal_csv",
    "read_manifest",
    "write_manifest",
    "read_points",
    "write_points",
    "read_curves",
    "write_curves",
    "write_rows",
    "read_tri_points",
]


class InputError(RegmapError):
    """An input file is missing or malformed."""


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=True)
        fh.write("\n")


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc


def read_mesh(path) -> CurvedMesh:
    data = load_json(path)
    if not isinstance(data, dict):
        raise InadmissibleMesh(f"{path}: mesh document must be an object")
    return CurvedMesh.from_json(data)


def write_mesh(mesh: CurvedMesh, path) -> None:
    dump_json(mesh.to_json(), path)


def write_rows(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_rows(path, header):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or [h.strip() for h in head] != header:
                raise InputError(f"{path}: expected header {','.join(header)}")
            rows = [r for r in reader if r]
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def read_nodal_csv(path, n_nodes: int) -> np.ndarray:
    """Nodal values from ``node_id,value`` rows; every node must appear once."""
    arr = _read_rows(path, ["node_id", "value"])
    ids = arr[:, 0]
    if not np.all(ids == np.round(ids)):
        raise InputError(f"{path}: node ids must be integers")
    ids = ids.astype(np.int64)
    if ids.size != n_nodes or np.any(np.sort(ids) != np.arange(n_nodes)):
        raise InputError(f"{path}: expected values for nodes 0..{n_nodes - 1}")
    out = np.empty(n_nodes)
    out[ids] = arr[:, 1]
    if not np.all(np.isfinite(out)):
        raise InputError(f"{path}: non-finite values")
    return out


def write_nodal_csv(path, values) -> None:
    write_rows(path, ["node_id", "value"], ((i, float(v)) for i, v in enumerate(values)))


def read_manifest(path):
    """Parameter table of a snapshot or sensor collection.

    Node ids in the value files index the vertices of the mesh file in
    first-occurrence order (the numbering of ``CurvedMesh.vertex_mesh``).

    Returns the P1 mesh, the parameter array (n, P) and the values (n, N).
    Paths inside the manifest are relative to the manifest file.
    """
    data = load_json(path)
    base = Path(path).parent
    try:
        mesh_file = base / data["mesh"]
        entries = data["snapshots"]
        params = np.array([np.atleast_1d(e["parameter"]) for e in entries], dtype=float)
        files = [base / e["file"] for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed manifest: {exc}") from exc
    mesh = read_mesh(mesh_file).vertex_mesh
    values = np.stack([read_nodal_csv(f, mesh.vertices.shape[0]) for f in files]) if files else np.zeros((0, mesh.vertices.shape[0]))
    return mesh, params, values


def write_manifest(path, mesh_file, params, values, prefix="snapshot") -> None:
    """Write one CSV per parameter next to ``path`` and the manifest itself."""
    base = Path(path).parent
    entries = []
    for i, (mu, v) in enumerate(zip(params, values)):
        name = f"{prefix}_{i:03d}.csv"
        write_nodal_csv(base / name, v)
        entries.append({"parameter": np.atleast_1d(mu).astype(float).tolist(), "file": name})
    dump_json({"mesh": os.path.relpath(mesh_file, base), "snapshots": entries}, path)


_POINT_HEADER = ["template_x", "template_y", "target_x", "target_y"]


def read_points(path):
    arr = _read_rows(path, _POINT_HEADER)
    if arr.shape[0] == 0:
        raise InputError(f"{path}: no points")
    return arr[:, :2], arr[:, 2:]


def write_points(path, template, target) -> None:
    rows = np.hstack([np.atleast_2d(template), np.atleast_2d(target)])
    write_rows(path, _POINT_HEADER, rows.tolist())


def read_curves(path):
    """Curves document: ``[{"name", "points", "facets": [[element, local_facet], ...]}]``.

    Returns the polylines and the bindings dict expected by the morph.
    """
    data = load_json(path)
    if not isinstance(data, list):
        raise InputError(f"{path}: curves document must be a list")
    curves, bindings = [], {}
    for i, c in enumerate(data):
        try:
            curves.append(Polyline(c["points"], str(c.get("name", f"curve{i}"))))
            bindings[i] = [(int(e), int(f)) for e, f in c["facets"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: curve {i}: {exc}") from exc
    return curves, bindings


def write_curves(path, curves, bindings) -> None:
    dump_json([c.to_json(bindings.get(i, [])) for i, c in enumerate(curves)], path)


def read_tri_points(path) -> np.ndarray:
    """Points from an ``x,y`` CSV."""
    return _read_rows(path, ["x", "y"])

