"""OBJ/PLY reading and writing.

PLY files written here use this layout::

    ply
    format binary_little_endian 1.0     (or ascii 1.0)
    element vertex N
    property double x
    property double y
    property double z
    property uchar red                  (only when colors are present)
    property uchar green
    property uchar blue
    element face F
    property list uchar int vertex_indices
    end_header

followed by N vertex records and F face records.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
from matplotlib import colormaps
from plyfile import PlyData, PlyElement, PlyParseError

from .mesh import Mesh, MeshError

PathLike = Union[str, os.PathLike]


def _detect_format(path: PathLike, fmt: Optional[str]) -> str:
    if fmt is not None:
        fmt = fmt.lower()
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in ("obj", "ply"):
        raise MeshError(f"unsupported mesh format {fmt!r}")
    return fmt


def _read_obj(path: PathLike) -> Mesh:
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError as exc:
                    raise MeshError(f"malformed vertex on line {lineno}") from exc
                if len(verts[-1]) != 3:
                    raise MeshError(f"malformed vertex on line {lineno}")
            elif parts[0] == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise MeshError(f"non-triangular face at index {len(faces)}")
                try:
                    faces.append([int(p.split("/")[0]) for p in idx])
                except ValueError as exc:
                    raise MeshError(f"malformed face on line {lineno}") from exc
    if not verts or not faces:
        raise MeshError(f"empty mesh in {path}")
    f = np.asarray(faces, dtype=np.int64)
    # negative OBJ indices are relative to the end of the vertex list
    f = np.where(f < 0, len(verts) + f, f - 1)
    return Mesh(np.asarray(verts), f)


def _read_ply(path: PathLike) -> Mesh:
    try:
        ply = PlyData.read(str(path))
    except (PlyParseError, ValueError, EOFError) as exc:
        raise MeshError(f"could not parse PLY {path}: {exc}") from exc
    names = [el.name for el in ply.elements]
    if "vertex" not in names or "face" not in names:
        raise MeshError(f"empty mesh in {path}")
    v = ply["vertex"].data
    if len(v) == 0 or ply["face"].count == 0:
        raise MeshError(f"empty mesh in {path}")
    verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    colors = None
    props = v.dtype.names
    if all(c in props for c in ("red", "green", "blue")):
        colors = np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64) / 255.0
    fdata = ply["face"].data
    key = "vertex_indices" if "vertex_indices" in fdata.dtype.names else "vertex_index"
    faces = np.empty((len(fdata), 3), dtype=np.int64)
    for k, row in enumerate(fdata[key]):
        if len(row) != 3:
            raise MeshError(f"non-triangular face at index {k}")
        faces[k] = row
    return Mesh(verts, faces, colors)


def load_mesh(path: PathLike, fmt: Optional[str] = None) -> Mesh:
    """Load a triangle mesh from OBJ or PLY.

    Vertex order is preserved. Raises :class:`MeshError` on parse failure, empty
    meshes, non-triangular or degenerate faces.
    """
    if not Path(path).exists():
        raise FileNotFoundError(path)
    if _detect_format(path, fmt) == "obj":
        return _read_obj(path)
    return _read_ply(path)


def _write_obj(mesh: Mesh, path: PathLike):
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def _write_ply(mesh: Mesh, path: PathLike, text: bool):
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if mesh.vertex_colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vrec = np.empty(mesh.n_vertices, dtype=fields)
    vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
    if mesh.vertex_colors is not None:
        rgb = np.round(mesh.vertex_colors * 255.0).astype(np.uint8)
        vrec["red"], vrec["green"], vrec["blue"] = rgb.T
    frec = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    frec["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(vrec, "vertex"), PlyElement.describe(frec, "face", len_types={"vertex_indices": "u1"})],
        text=text,
        byte_order="<",
    ).write(str(path))


def save_mesh(mesh: Mesh, path: PathLike, fmt: Optional[str] = None, text: bool = False):
    """Write a mesh as OBJ or PLY (binary little-endian unless ``text``)."""
    if _detect_format(path, fmt) == "obj":
        _write_obj(mesh, path)
    else:
        _write_ply(mesh, path, text)


def scalars_to_colors(scalars: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """Map scalars to RGB through a monotone colormap; a constant field maps to mid-scale."""
    s = np.asarray(scalars, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        t = (s - lo) / (hi - lo)
    else:
        t = np.full_like(s, 0.5)
    return colormaps[cmap](t)[:, :3]


def save_mesh_with_scalars(mesh: Mesh, scalars, path: PathLike, cmap: str = "viridis", text: bool = False):
    """Write a PLY whose vertex colors encode ``scalars`` (min to low end, max to high end)."""
    scalars = np.asarray(scalars, dtype=np.float64).ravel()
    if len(scalars) != mesh.n_vertices:
        raise MeshError(f"expected {mesh.n_vertices} scalars, got {len(scalars)}")
    _write_ply(mesh.with_colors(scalars_to_colors(scalars, cmap)), path, text)
