"""Reference implementations used only by the tests.

Each one deliberately takes a different route than the library code it checks.
"""
from __future__ import annotations

import heapq
import itertools

import numpy as np


def closest_point_brute(q, vertices, faces):
    """Closest point over every triangle: plane projection if inside, else best of the three edges."""
    q = np.asarray(q, dtype=np.float64)
    faces = np.asarray(faces)
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    n2 = np.einsum("ij,ij->i", n, n)
    p = q - (np.einsum("ij,ij->i", q - a, n) / n2)[:, None] * n
    # barycentric coordinates by signed sub-triangle areas
    l0 = np.einsum("ij,ij->i", np.cross(b - p, c - p), n) / n2
    l1 = np.einsum("ij,ij->i", np.cross(c - p, a - p), n) / n2
    inside = np.minimum(np.minimum(l0, l1), 1.0 - l0 - l1) >= 0
    cands = [np.where(inside[:, None], p, np.inf)]
    for u, v in ((a, b), (b, c), (c, a)):
        d = v - u
        t = np.clip(np.einsum("ij,ij->i", q - u, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
        cands.append(u + t[:, None] * d)
    pts = np.stack(cands)  # (4, F, 3)
    dist = np.sum((pts - q) ** 2, axis=-1)
    dist[0, ~inside] = np.inf
    k, fi = np.unravel_index(np.argmin(dist), dist.shape)
    return np.sqrt(dist[k, fi]), pts[k, fi], int(fi)


def horn_similarity(src, dst):
    """Horn's unit-quaternion absolute orientation plus the least-squares scale."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    ps, qd = src - src.mean(0), dst - dst.mean(0)
    m = ps.T @ qd
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    nmat = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    w, v = np.linalg.eigh(nmat)
    q0, qx, qy, qz = v[:, -1]
    rot = np.array([
        [q0 ** 2 + qx ** 2 - qy ** 2 - qz ** 2, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 ** 2 - qx ** 2 + qy ** 2 - qz ** 2, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 ** 2 - qx ** 2 - qy ** 2 + qz ** 2],
    ])
    scale = np.einsum("ij,ij->", qd, ps @ rot.T) / np.einsum("ij,ij->", ps, ps)
    t = dst.mean(0) - scale * rot @ src.mean(0)
    return rot, t, scale


def dijkstra_edges(vertices, faces, source):
    """Shortest edge-path lengths from ``source`` with a binary heap."""
    n = len(vertices)
    nbrs = [set() for _ in range(n)]
    for f in faces:
        for a, b in itertools.combinations(f, 2):
            nbrs[a].add(b)
            nbrs[b].add(a)
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for w in nbrs[u]:
            nd = d + float(np.linalg.norm(vertices[u] - vertices[w]))
            if nd < dist[w]:
                dist[w] = nd
                heapq.heappush(heap, (nd, w))
    return dist


def b3_scalar(x):
    x = abs(float(x))
    if x < 1:
        return 2.0 / 3.0 - x * x + 0.5 * x ** 3
    if x < 2:
        return (2.0 - x) ** 3 / 6.0
    return 0.0


def bspline_lattice(xi, xj, sigma, scale=1.0):
    """Explicit triple loop over every lattice shift touching either support."""
    u = np.asarray(xi, float) / sigma
    w = np.asarray(xj, float) / sigma
    lo = np.floor(np.minimum(u, w)).astype(int) - 3
    hi = np.ceil(np.maximum(u, w)).astype(int) + 3
    total = 0.0
    for k0 in range(lo[0], hi[0] + 1):
        for k1 in range(lo[1], hi[1] + 1):
            for k2 in range(lo[2], hi[2] + 1):
                k = (k0, k1, k2)
                zi = np.prod([b3_scalar(u[a] - k[a]) for a in range(3)])
                if zi == 0.0:
                    continue
                zj = np.prod([b3_scalar(w[a] - k[a]) for a in range(3)])
                total += zi * zj
    return scale * total


def ridge_gradient_descent(x, y, rho, w=None, tol=1e-14, max_iter=200000):
    """Plain gradient descent with step 1/L on the (weighted) ridge loss."""
    w2 = np.ones(len(y)) if w is None else np.asarray(w) ** 2
    xw = x * np.sqrt(w2)[:, None]
    lip = np.linalg.norm(xw, 2) ** 2 + rho
    alpha = np.zeros(x.shape[1])
    for _ in range(max_iter):
        g = -x.T @ (w2 * (y - x @ alpha)) + rho * alpha
        step = g / lip
        alpha -= step
        if np.linalg.norm(step) < tol * max(1.0, np.linalg.norm(alpha)):
            break
    return alpha


def mutual_nearest_brute(template_vertices, target_vertices, faces):
    """O(N^2) symmetric test: nearest target vertex, then nearest template vertex back, within one ring."""
    d = ((template_vertices[:, None, :] - target_vertices[None, :, :]) ** 2).sum(-1)
    fwd = d.argmin(axis=1)
    back = d.argmin(axis=0)[fwd]
    ring = [set() for _ in range(len(template_vertices))]
    for f in faces:
        for a in f:
            ring[a].update(int(b) for b in f)
    return np.array([back[i] == i or int(back[i]) in ring[i] for i in range(len(template_vertices))])


def great_circle(p, q, radius=1.0):
    c = np.clip((p @ q.T) / radius ** 2, -1.0, 1.0)
    return radius * np.arccos(c)
