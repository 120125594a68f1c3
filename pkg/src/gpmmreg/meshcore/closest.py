"""Exact closest-point queries on triangle meshes through an AABB hierarchy.

Queries are answered in batches: the traversal frontier is a flat array of
(query, node) pairs, so every step is a handful of vectorized numpy calls
instead of a Python loop per query.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh


def _dot(u, v):
    return u[:, 0] * v[:, 0] + u[:, 1] * v[:, 1] + u[:, 2] * v[:, 2]


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to points ``p``, row by row.

    Voronoi-region classification following Ericson, *Real-Time Collision
    Detection*, 5.1.5. Returns the points and their barycentric coordinates.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    m = len(p)
    bary = np.empty((m, 3))
    done = np.zeros(m, dtype=bool)

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def assign(mask, u, v, w):
        sel = mask & ~done
        bary[sel, 0] = u[sel] if np.ndim(u) else u
        bary[sel, 1] = v[sel] if np.ndim(v) else v
        bary[sel, 2] = w[sel] if np.ndim(w) else w
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t, t, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t, 0.0, t)
        e43, e56 = d4 - d3, d5 - d6
        t = e43 / (e43 + e56)
        assign((va <= 0) & (e43 >= 0) & (e56 >= 0), 0.0, 1.0 - t, t)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(m, dtype=bool), 1.0 - v - w, v, w)

    pts = a + bary[:, 1:2] * ab + bary[:, 2:3] * ac
    return pts, bary


class SurfaceHit(NamedTuple):
    points: np.ndarray
    faces: np.ndarray
    barycentric: np.ndarray
    distances: np.ndarray
    normals: np.ndarray


class BVH:
    """Axis-aligned bounding-volume hierarchy over the faces of a mesh.

    Parameters
    ----------
    mesh : Mesh
    leaf_size : int
        Maximum number of faces stored in a leaf.
    """

    def __init__(self, mesh: Mesh, leaf_size: int = 8):
        self.mesh = mesh
        tri = mesh.vertices[mesh.faces]
        self._a, self._b, self._c = (np.ascontiguousarray(tri[:, k]) for k in range(3))
        fmin, fmax = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)

        order = np.arange(mesh.n_faces)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(idx_slice_start, idx_slice_end):
            ids = order[idx_slice_start:idx_slice_end]
            lo.append(fmin[ids].min(axis=0))
            hi.append(fmax[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(idx_slice_start)
            count.append(idx_slice_end - idx_slice_start)
            return len(lo) - 1

        stack = [new_node(0, len(order))]
        while stack:
            node = stack.pop()
            s, n = start[node], count[node]
            if n <= leaf_size:
                continue
            ids = order[s:s + n]
            c = cent[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            perm = np.argsort(c[:, axis], kind="stable")
            order[s:s + n] = ids[perm]
            mid = s + n // 2
            l_id, r_id = new_node(s, mid), new_node(mid, s + n)
            left[node], right[node] = l_id, r_id
            count[node] = 0
            stack.extend((l_id, r_id))

        self.node_lo = np.array(lo)
        self.node_hi = np.array(hi)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)
        self.order = order
        used = np.unique(mesh.faces)
        self._seed_ids = used
        self._seed_tree = cKDTree(mesh.vertices[used])

    def query(self, points) -> SurfaceHit:
        """Closest surface point for each row of ``points`` (exact)."""
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = len(q)
        # nearest vertex distance is a valid upper bound on the surface distance
        d_seed, _ = self._seed_tree.query(q)
        slack = 1e-10 * self.mesh.diameter ** 2
        best = d_seed * d_seed * (1.0 + 1e-9) + slack
        best_face = np.full(m, -1, dtype=np.int64)
        best_bary = np.zeros((m, 3))
        best_pt = np.zeros((m, 3))
        found = np.zeros(m, dtype=bool)

        qi = np.arange(m)
        node = np.zeros(m, dtype=np.int64)
        while len(qi):
            qq = q[qi]
            gap = np.maximum(np.maximum(self.node_lo[node] - qq, qq - self.node_hi[node]), 0.0)
            box_d2 = _dot(gap, gap)
            keep = box_d2 <= best[qi]
            qi, node = qi[keep], node[keep]
            leaf = self.count[node] > 0

            if leaf.any():
                lq, ln = qi[leaf], node[leaf]
                cnt = self.count[ln]
                pq = np.repeat(lq, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                pf = self.order[np.repeat(self.start[ln], cnt) + offs]
                pts, bary = closest_point_on_triangles(q[pq], self._a[pf], self._b[pf], self._c[pf])
                diff = pts - q[pq]
                d2 = _dot(diff, diff)
                # per query: smallest distance, ties broken by lowest face index
                srt = np.lexsort((pf, d2, pq))
                pq_s = pq[srt]
                first = np.ones(len(srt), dtype=bool)
                first[1:] = pq_s[1:] != pq_s[:-1]
                cand = srt[first]
                cq = pq[cand]
                better = (d2[cand] < best[cq]) | ~found[cq] & (d2[cand] <= best[cq])
                better |= found[cq] & (d2[cand] == best[cq]) & (pf[cand] < best_face[cq])
                cand, cq = cand[better], cq[better]
                best[cq] = d2[cand]
                best_face[cq] = pf[cand]
                best_bary[cq] = bary[cand]
                best_pt[cq] = pts[cand]
                found[cq] = True

            inner = ~leaf
            qi = np.concatenate([qi[inner], qi[inner]])
            node = np.concatenate([self.left[node[inner]], self.right[node[inner]]])

        vn = self.mesh.vertex_normals[self.mesh.faces[best_face]]
        nrm = (best_bary[:, :, None] * vn).sum(axis=1)
        ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        fn = self.mesh.face_normals[best_face]
        nrm = np.where(ln > 1e-12, nrm / np.where(ln > 0, ln, 1.0), fn)
        return SurfaceHit(best_pt, best_face, best_bary, np.sqrt(best), nrm)


def get_bvh(mesh: Mesh) -> BVH:
    """BVH cached on the mesh object (meshes are immutable after construction)."""
    bvh = mesh.__dict__.get("_bvh")
    if bvh is None:
        bvh = BVH(mesh)
        mesh.__dict__["_bvh"] = bvh
    return bvh


def nearest_point_on_surface(mesh: Mesh, query):
    """Closest point on ``mesh`` to a single 3-vector.

    Returns ``(point, face_index, interpolated_normal)``.
    """
    hit = get_bvh(mesh).query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return hit.points[0], int(hit.faces[0]), hit.normals[0]

