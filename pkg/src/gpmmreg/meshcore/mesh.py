"""Indexed triangle mesh container."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse


class MeshError(ValueError):
    """Raised for malformed or degenerate mesh data."""


def _area_weighted_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # un-normalized face normal has length 2*area, so summing it is area weighting
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1)
    # vertices not referenced by any face keep a zero normal
    ok = norm > 0
    vn[ok] /= norm[ok, None]
    return vn


@dataclass(eq=False)
class Mesh:
    """Triangle mesh with area-weighted vertex normals.

    Parameters
    ----------
    vertices : (N, 3) float array
        Vertex positions in millimetres.
    faces : (F, 3) int array
        Vertex indices of each triangle, counter-clockwise.
    vertex_colors : (N, 3) float array, optional
        RGB in [0, 1].
    validate : bool
        Reject out-of-range indices and degenerate triangles.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: Optional[np.ndarray] = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertex_colors is not None:
            self.vertex_colors = np.clip(
                np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0
            )
            if len(self.vertex_colors) != len(self.vertices):
                raise MeshError("vertex_colors length does not match vertex count")
        if self.validate:
            self._check()
        self.vertex_normals = _area_weighted_normals(self.vertices, self.faces)
        for arr in (self.vertices, self.faces, self.vertex_normals):
            arr.setflags(write=False)

    def _check(self):
        n = len(self.vertices)
        if n < 3:
            raise MeshError(f"mesh needs at least 3 vertices, got {n}")
        if len(self.faces) == 0:
            raise MeshError("mesh has no faces")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        bad = np.flatnonzero((self.faces < 0).any(axis=1) | (self.faces >= n).any(axis=1))
        if len(bad):
            raise MeshError(f"face index out of range at face {bad[0]}")
        f = self.faces
        dup = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
        if len(dup):
            raise MeshError(f"degenerate face at index {dup[0]} (repeated vertex)")
        area = self.face_areas
        scale = max(self.diameter, 1e-300)
        flat = np.flatnonzero(area <= 1e-14 * scale * scale)
        if len(flat):
            raise MeshError(f"degenerate face at index {flat[0]} (zero area)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def face_normals(self) -> np.ndarray:
        v0, v1, v2 = (self.vertices[self.faces[:, k]] for k in range(3))
        fn = np.cross(v1 - v0, v2 - v0)
        return fn / np.linalg.norm(fn, axis=1, keepdims=True)

    @property
    def face_areas(self) -> np.ndarray:
        v0, v1, v2 = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal, used as the mesh's length scale."""
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) with ``e[:, 0] < e[:, 1]``."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency of the edge graph."""
        e = self.edges
        n = self.n_vertices
        a = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.hexdigest()

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same connectivity and colors, new positions."""
        return Mesh(vertices, self.faces, self.vertex_colors, validate=False)

    def with_colors(self, colors: Optional[np.ndarray]) -> "Mesh":
        return Mesh(self.vertices, self.faces, colors, validate=False)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray, scale: float = 1.0) -> "Mesh":
        return self.with_vertices(scale * self.vertices @ np.asarray(rotation).T + translation)
