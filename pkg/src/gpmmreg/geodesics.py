"""Geodesic distances on triangle meshes with the heat method.

For a source vertex ``s`` the distance is obtained in three sparse solves:

1. heat flow: ``(M - t L) u = delta_s`` with ``t = t_scale * h**2``;
2. per-face unit field ``X = -grad u / |grad u|``;
3. Poisson problem ``L phi = div X``, shifted so that ``phi(s) = 0``.

``L`` is the cotangent Laplacian with positive off-diagonal weights and a
negative diagonal (negative semi-definite), ``M`` the lumped vertex areas and
``h`` the mean edge length. Open boundaries get natural (Neumann) conditions.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from filelock import FileLock
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .meshcore import Mesh, MeshError

log = logging.getLogger(__name__)

CACHE_MAGIC = b"GPGEOD01"
_HEADER = struct.Struct("<8sQQd64s")


def _corner_cotangents(vertices, faces):
    """cot of the interior angle at each corner, (F, 3)."""
    p = vertices[faces]
    cots = np.empty((len(faces), 3))
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cots[:, k] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
    return cots


@dataclass(eq=False)
class DiscreteOperators:
    """Cotangent Laplacian, lumped mass, and the face gradient / vertex divergence maps.

    ``gradient`` maps vertex values (N,) to stacked per-face vectors (3F,)
    laid out as ``[g_x, g_y, g_z]`` per face; ``divergence`` maps such a stacked
    field back to integrated vertex divergences (N,).
    """

    mesh: Mesh
    laplacian: sparse.csr_matrix
    mass: sparse.dia_matrix
    mean_edge_length: float
    gradient: sparse.csr_matrix
    divergence: sparse.csr_matrix
    _heat_cache: dict = field(default_factory=dict, repr=False)
    _poisson: object = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def mesh_hash(self) -> str:
        return self.mesh.content_hash()

    def heat_solver(self, t: float):
        lu = self._heat_cache.get(t)
        if lu is None:
            lu = splu((self.mass - t * self.laplacian).tocsc())
            self._heat_cache[t] = lu
        return lu

    def poisson_solver(self):
        """Factorization of ``-L`` with one pinned vertex per connected component."""
        if self._poisson is None:
            n_comp, labels = csgraph.connected_components(self.mesh.adjacency(), directed=False)
            pins = np.array([np.flatnonzero(labels == c)[0] for c in range(n_comp)])
            free = np.setdiff1d(np.arange(self.n_vertices), pins)
            a = (-self.laplacian)[free][:, free].tocsc()
            self._poisson = (splu(a), free, labels, pins)
        return self._poisson

    def solve_poisson(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``L phi = rhs`` (columns of ``rhs``), zero at the pinned vertices."""
        lu, free, _, _ = self.poisson_solver()
        rhs = np.asarray(rhs, dtype=np.float64)
        phi = np.zeros_like(rhs)
        phi[free] = lu.solve(-rhs[free])
        return phi


def build_operators(mesh: Mesh) -> DiscreteOperators:
    """Assemble cotangent Laplacian, lumped mass matrix and gradient/divergence maps.

    Raises :class:`MeshError` for zero-area faces and non-manifold edges.
    """
    v, f = mesh.vertices, mesh.faces
    n, nf = len(v), len(f)
    area = mesh.face_areas
    bad = np.flatnonzero(area <= 1e-14 * mesh.diameter ** 2)
    if len(bad):
        raise MeshError(f"degenerate triangle at face {bad[0]}")
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    over = np.flatnonzero(counts > 2)
    if len(over):
        i, j = uniq[over[0]]
        raise MeshError(f"non-manifold edge ({i}, {j}) shared by {counts[over[0]]} faces")

    cot = _corner_cotangents(v, f)
    rows, cols, vals = [], [], []
    for k in range(3):
        # the corner k faces edge (k+1, k+2)
        a, b = f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        w = 0.5 * cot[:, k]
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    lap = (off - sparse.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()

    lumped = np.zeros(n)
    for k in range(3):
        np.add.at(lumped, f[:, k], area / 3.0)
    if np.any(lumped <= 0):
        raise MeshError(f"vertex {int(np.flatnonzero(lumped <= 0)[0])} is not part of any face")
    mass = sparse.diags(lumped)

    h = float(np.linalg.norm(v[uniq[:, 0]] - v[uniq[:, 1]], axis=1).mean())

    p = v[f]
    normal = mesh.face_normals
    grows, gcols, gvals = [], [], []
    drows, dcols, dvals = [], [], []
    fidx = np.arange(nf)
    for k in range(3):
        # edge opposite corner k, counter-clockwise
        opp = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]
        g = np.cross(normal, opp) / (2.0 * area)[:, None]
        e1 = p[:, (k + 1) % 3] - p[:, k]
        e2 = p[:, (k + 2) % 3] - p[:, k]
        dcoef = 0.5 * (cot[:, (k + 2) % 3, None] * e1 + cot[:, (k + 1) % 3, None] * e2)
        for c in range(3):
            grows.append(3 * fidx + c)
            gcols.append(f[:, k])
            gvals.append(g[:, c])
            drows.append(f[:, k])
            dcols.append(3 * fidx + c)
            dvals.append(dcoef[:, c])
    grad = sparse.coo_matrix(
        (np.concatenate(gvals), (np.concatenate(grows), np.concatenate(gcols))), shape=(3 * nf, n)
    ).tocsr()
    div = sparse.coo_matrix(
        (np.concatenate(dvals), (np.concatenate(drows), np.concatenate(dcols))), shape=(n, 3 * nf)
    ).tocsr()
    return DiscreteOperators(mesh, lap, mass, h, grad, div)


@dataclass
class GeodesicField:
    """Distances from ``sources`` (rows) to every vertex (columns).

    ``heat`` and ``direction`` hold the step-1 and step-2 intermediates when
    they were requested (``keep_intermediates=True``).
    """

    sources: np.ndarray
    distances: np.ndarray
    t: float
    t_scale: float = 1.0
    mesh_hash: str = ""
    asymmetry: float = float("nan")
    heat: Optional[np.ndarray] = None
    direction: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64)
        self._row = {int(s): i for i, s in enumerate(self.sources)}

    @property
    def n_vertices(self) -> int:
        return self.distances.shape[1]

    def covers(self, vertices) -> bool:
        return all(int(v) in self._row for v in np.atleast_1d(vertices))

    def rows(self, vertices) -> np.ndarray:
        """Row indices of the given source vertices; KeyError if any is missing."""
        try:
            return np.array([self._row[int(v)] for v in np.atleast_1d(vertices)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"vertex {exc.args[0]} is not a source of this geodesic field") from None

    def from_sources(self, src_vertices, to_vertices=None) -> np.ndarray:
        """Distance block ``d[src, to]`` for cached sources ``src_vertices``."""
        d = self.distances[self.rows(src_vertices)]
        return d if to_vertices is None else d[:, np.asarray(to_vertices)]

    def between(self, a, b) -> np.ndarray:
        """Distances ``d[a_i, b_j]``; at least one side of each pair must be a source."""
        a, b = np.atleast_1d(a), np.atleast_1d(b)
        if self.covers(a):
            return self.from_sources(a, b)
        if self.covers(b):
            return self.from_sources(b, a).T
        raise KeyError("neither vertex set is fully covered by the geodesic cache")


def _heat_distances(ops: DiscreteOperators, sources: np.ndarray, t: float, keep=False):
    mesh = ops.mesh
    n, nf = mesh.n_vertices, mesh.n_faces
    delta = np.zeros((n, len(sources)))
    delta[sources, np.arange(len(sources))] = 1.0
    u = ops.heat_solver(t).solve(delta)
    g = (ops.gradient @ u).reshape(nf, 3, -1)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    x = -g / np.where(norm > 0, norm, 1.0)
    div = ops.divergence @ x.reshape(3 * nf, -1)
    phi = ops.solve_poisson(div)
    _, _, labels, _ = ops.poisson_solver()
    phi = phi - phi[sources, np.arange(len(sources))]
    # vertices on other connected components are unreachable
    unreachable = labels[:, None] != labels[sources][None, :]
    phi[unreachable] = np.inf
    np.clip(phi, 0.0, None, out=phi)
    return phi.T, (u.T if keep else None), (x if keep else None)


def heat_geodesic(ops: DiscreteOperators, sources: Sequence[int], t_scale: float = 1.0,
                  keep_intermediates: bool = False, chunk: Optional[int] = None) -> GeodesicField:
    """Heat-method distances from each of ``sources`` to all vertices."""
    src = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if len(src) == 0:
        raise ValueError("at least one source vertex is required")
    if src.min() < 0 or src.max() >= ops.n_vertices:
        raise IndexError("source vertex out of range")
    t = t_scale * ops.mean_edge_length ** 2
    if chunk is None:
        chunk = max(1, int(2e7 // (9 * ops.mesh.n_faces)))
    rows, heats, dirs = [], [], []
    for s in range(0, len(src), chunk):
        d, u, x = _heat_distances(ops, src[s:s + chunk], t, keep_intermediates)
        rows.append(d)
        heats.append(u)
        dirs.append(x)
    return GeodesicField(
        src,
        np.vstack(rows),
        t,
        t_scale,
        ops.mesh_hash,
        heat=np.vstack(heats) if keep_intermediates else None,
        direction=np.concatenate(dirs, axis=-1) if keep_intermediates else None,
    )


def symmetrize(field: GeodesicField) -> GeodesicField:
    """Average ``d[i, j]`` and ``d[j, i]`` over all source pairs; records the prior asymmetry."""
    d = field.distances.copy()
    block = d[:, field.sources]
    asym = float(np.abs(block - block.T).max()) if len(block) else 0.0
    d[:, field.sources] = 0.5 * (block + block.T)
    return GeodesicField(field.sources, d, field.t, field.t_scale, field.mesh_hash, asym)


def write_cache(field: GeodesicField, path):
    path = Path(path)
    with FileLock(str(path) + ".lock"):
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CACHE_MAGIC, field.n_vertices, len(field.sources), field.t_scale,
                                  field.mesh_hash.encode("ascii").ljust(64, b"\0")))
            fh.write(field.sources.astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(field.distances, dtype="<f8").tobytes())


def read_cache(path, mesh_hash: Optional[str] = None, t_scale: Optional[float] = None,
               mean_edge_length: Optional[float] = None) -> GeodesicField:
    """Read a distance cache; raises ValueError if it is corrupt or does not match."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated geodesic cache header")
    magic, n, s, ts, hsh = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValueError("bad geodesic cache magic")
    hsh = hsh.rstrip(b"\0").decode("ascii")
    if len(raw) != _HEADER.size + 8 * s + 8 * s * n:
        raise ValueError("geodesic cache has the wrong size")
    if mesh_hash is not None and hsh != mesh_hash:
        raise ValueError("geodesic cache belongs to a different mesh")
    if t_scale is not None and ts != t_scale:
        raise ValueError("geodesic cache was computed with a different t_scale")
    off = _HEADER.size
    src = np.frombuffer(raw, "<i8", s, off).astype(np.int64)
    d = np.frombuffer(raw, "<f8", s * n, off + 8 * s).reshape(s, n).copy()
    t = ts * mean_edge_length ** 2 if mean_edge_length is not None else float("nan")
    return GeodesicField(src, d, t, ts, hsh)


def pairwise_geodesics(ops: DiscreteOperators, vertices=None, t_scale: float = 1.0,
                       cache: Optional[str] = None) -> GeodesicField:
    """Distances from ``vertices`` (default: all) to every vertex, symmetrized on the source block.

    With ``cache``, a matching cache file is reused; a corrupt or mismatching
    one triggers recomputation with a warning and is overwritten.
    """
    src = np.arange(ops.n_vertices) if vertices is None else np.asarray(vertices, dtype=np.int64)
    if cache is not None and Path(cache).exists():
        try:
            field = read_cache(cache, ops.mesh_hash, t_scale, ops.mean_edge_length)
            if np.array_equal(field.sources, src):
                return field
            warnings.warn(f"geodesic cache {cache} has different sources; recomputing")
        except ValueError as exc:
            warnings.warn(f"geodesic cache {cache} unusable ({exc}); recomputing")
    field = symmetrize(heat_geodesic(ops, src, t_scale))
    if cache is not None:
        write_cache(field, cache)
    return field


def farthest_point_sources(ops: DiscreteOperators, count: int, start: int = 0,
                           t_scale: float = 1.0) -> GeodesicField:
    """Farthest-point sampling in the geodesic metric, returning the sampled field.

    Starts at vertex ``start`` and repeatedly adds the vertex farthest from the
    current set; each step costs one single-source heat solve.
    """
    n = ops.n_vertices
    count = min(count, n)
    t = t_scale * ops.mean_edge_length ** 2
    chosen = [int(start)]
    rows = []
    mind = np.full(n, np.inf)
    for _ in range(count):
        d, _, _ = _heat_distances(ops, np.array([chosen[-1]]), t)
        rows.append(d[0])
        mind = np.minimum(mind, d[0])
        if len(chosen) == count:
            break
        mind[chosen] = -1.0
        chosen.append(int(np.argmax(mind)))
    field = GeodesicField(np.array(chosen), np.vstack(rows), t, t_scale, ops.mesh_hash)
    return symmetrize(field)
