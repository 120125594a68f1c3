"""Deterministic synthetic meshes standing in for face scans.

``plane``      regular grid in the z=0 plane.
``slit_plane`` same grid with an interior cut along y=0 (two coincident lips).
``icosphere``  subdivided icosahedron on a sphere.
``facelike``   ellipsoidal cap with a mouth slit and two eye holes.
"""
from __future__ import annotations

import numpy as np

from ..meshcore import Mesh

KINDS = ("plane", "slitPlane", "icosphere", "facelike")


def _grid_faces(nx: int, ny: int) -> np.ndarray:
    # alternating diagonals keep the triangulation free of a preferred direction
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = j * nx + i
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    flip = (i + j) % 2 == 1
    t1 = np.where(flip[:, None], np.c_[v00, v10, v01], np.c_[v00, v10, v11])
    t2 = np.where(flip[:, None], np.c_[v10, v11, v01], np.c_[v00, v11, v01])
    return np.vstack([t1, t2])


def _grid_vertices(nx, ny, width, height):
    x = np.linspace(-width / 2, width / 2, nx)
    y = np.linspace(-height / 2, height / 2, ny)
    xx, yy = np.meshgrid(x, y, indexing="xy")
    return np.c_[xx.ravel(), yy.ravel(), np.zeros(nx * ny)]


def plane(n: int = 32, size: float = 100.0, ny: int = None) -> Mesh:
    """``n`` x ``ny`` vertex grid spanning ``size`` mm in x (square cells)."""
    if n < 2:
        raise ValueError("plane needs n >= 2")
    ny = n if ny is None else ny
    h = size / (n - 1)
    return Mesh(_grid_vertices(n, ny, size, h * (ny - 1)), _grid_faces(n, ny))


def _cut_slit(vertices, faces, on_slit, below):
    """Duplicate ``on_slit`` vertices and rewire faces flagged ``below`` to the copies."""
    idx = np.flatnonzero(on_slit)
    remap = np.arange(len(vertices))
    remap[idx] = len(vertices) + np.arange(len(idx))
    faces = faces.copy()
    faces[below] = remap[faces[below]]
    return np.vstack([vertices, vertices[idx]]), faces


def slit_plane(n: int = 41, size: float = 100.0, slit_length: float = 40.0) -> Mesh:
    """Square grid with a closed slit along y = 0 for ``|x| < slit_length / 2``.

    ``n`` must be odd so that a grid row lies on y = 0. The slit endpoints are
    shared by both lips; interior slit vertices are duplicated, the copies
    (appended at the end) belonging to the lower lip.
    """
    if n % 2 == 0 or n < 5:
        raise ValueError("slit_plane needs an odd n >= 5")
    verts = _grid_vertices(n, n, size, size)
    faces = _grid_faces(n, n)
    h = size / (n - 1)
    on_slit = (np.abs(verts[:, 1]) < 1e-9 * size) & (np.abs(verts[:, 0]) < slit_length / 2 - 1e-6 * h)
    if on_slit.sum() < 1:
        raise ValueError("slit shorter than one grid cell")
    below = verts[faces].mean(axis=1)[:, 1] < 0
    v, f = _cut_slit(verts, faces, on_slit, below)
    return Mesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron with ``10 * 4**k + 2`` vertices."""
    if not 0 <= subdivisions <= 7:
        raise ValueError("subdivisions must be in [0, 7]")
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        mab, mbc, mca = m[0], m[1], m[2]
        f = np.vstack([np.c_[a, mab, mca], np.c_[b, mbc, mab], np.c_[c, mca, mbc], np.c_[mab, mbc, mca]])
        v = np.vstack([v, mid])
    return Mesh(v * radius, f)


def _drop_unused(vertices, faces):
    used = np.unique(faces)
    remap = np.full(len(vertices), -1)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces], used


def facelike(nx: int = 29, ny: int = 37, width: float = 140.0, height: float = 180.0,
             depth: float = 60.0) -> Mesh:
    """Oval, ellipsoidal face-sized cap with a closed mouth slit and two eye holes (mm).

    Grid resolution is ``nx`` x ``ny`` before the holes are cut; ``nx`` in
    [9, 201], ``ny`` in [9, 201].
    """
    if not (9 <= nx <= 201 and 9 <= ny <= 201):
        raise ValueError("facelike resolution out of bounds")
    verts = _grid_vertices(nx, ny, width, height)
    faces = _grid_faces(nx, ny)
    hy = height / (ny - 1)
    # mouth on the grid row nearest to 22% below centre
    mouth_y = verts[np.argmin(np.abs(verts[:, 1] + 0.22 * height)), 1]
    cent = verts[faces].mean(axis=1)
    eyes = np.zeros(len(faces), dtype=bool)
    for ex in (-0.23 * width, 0.23 * width):
        ey = 0.14 * height
        eyes |= ((cent[:, 0] - ex) / (0.1 * width)) ** 2 + ((cent[:, 1] - ey) / (0.045 * height)) ** 2 < 1.0
    # oval outline
    outside = (cent[:, 0] / (0.5 * width)) ** 2 + (cent[:, 1] / (0.5 * height)) ** 2 >= 1.0
    faces = faces[~eyes & ~outside]
    half = 0.18 * width
    on_slit = (np.abs(verts[:, 1] - mouth_y) < 1e-6 * hy) & (np.abs(verts[:, 0]) < half)
    below = verts[faces].mean(axis=1)[:, 1] < mouth_y
    verts, faces = _cut_slit(verts, faces, on_slit, below)
    verts, faces, _ = _drop_unused(verts, faces)
    r2 = (verts[:, 0] / (0.5 * width)) ** 2 + (verts[:, 1] / (0.5 * height)) ** 2
    verts[:, 2] = depth * np.sqrt(np.clip(1.0 - 0.75 * r2, 0.0, None))
    return Mesh(verts, faces)


def make_synthetic(kind: str, resolution: int = None) -> Mesh:
    """Build one of :data:`KINDS` at a given resolution (``None`` for the default)."""
    if kind == "plane":
        return plane(resolution or 32)
    if kind == "slitPlane":
        return slit_plane(resolution or 41)
    if kind == "icosphere":
        return icosphere(3 if resolution is None else resolution)
    if kind == "facelike":
        nx = resolution or 29
        return facelike(nx, int(round(nx * 37 / 29)) | 1)
    raise ValueError(f"unknown synthetic mesh kind {kind!r}; expected one of {KINDS}")


def slit_sides(mesh: Mesh, slit_y: float = 0.0) -> np.ndarray:
    """+1 for vertices above the slit line, -1 below; vertices on the line take the side of their faces.

    Vertices on the line with faces on both sides (outside the slit) get 0.
    """
    v, f = mesh.vertices, mesh.faces
    tol = 1e-9 * mesh.diameter
    side = np.sign(v[:, 1] - slit_y)
    side[np.abs(v[:, 1] - slit_y) <= tol] = 0
    cy = v[f].mean(axis=1)[:, 1] - slit_y
    up = np.zeros(len(v), dtype=bool)
    down = np.zeros(len(v), dtype=bool)
    for k in range(3):
        up[f[cy > 0, k]] = True
        down[f[cy < 0, k]] = True
    on = side == 0
    side[on & up & ~down] = 1
    side[on & down & ~up] = -1
    return side


def lip_pairs(mesh: Mesh, slit_y: float = 0.0, offset_rows: int = 1):
    """Vertex pairs straddling the slit at the same x, ``offset_rows`` grid rows from it.

    Only pairs whose x lies strictly inside the slit are returned.
    """
    v = mesh.vertices
    side = slit_sides(mesh, slit_y)
    tol = 1e-9 * mesh.diameter
    on_line = np.abs(v[:, 1] - slit_y) <= tol
    lips_up = np.flatnonzero(on_line & (side > 0))
    rows = np.unique(np.round(v[:, 1], 9))
    k0 = np.argmin(np.abs(rows - slit_y))
    y_up, y_dn = rows[k0 + offset_rows], rows[k0 - offset_rows]
    pairs = []
    for i in lips_up:
        x = v[i, 0]
        up = np.flatnonzero((np.abs(v[:, 0] - x) <= tol) & (np.abs(v[:, 1] - y_up) <= tol))
        dn = np.flatnonzero((np.abs(v[:, 0] - x) <= tol) & (np.abs(v[:, 1] - y_dn) <= tol))
        if len(up) and len(dn):
            pairs.append((int(up[0]), int(dn[0])))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)
