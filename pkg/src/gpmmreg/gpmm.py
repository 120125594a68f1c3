"""Low-rank Gaussian process morphable models.

The prior displacement field is ``u(x) = mu(x) + sum_i alpha_i sqrt(lambda_i) phi_i(x)``
with ``alpha_i ~ N(0, 1)``. Stacking ``sqrt(lambda_i) phi_i`` evaluated at the
vertices gives the basis matrix ``X`` (3N x r) and ``u = mu + X alpha``.

Vectors of length 3N are vertex-major: ``[x_0, y_0, z_0, x_1, ...]``, i.e.
``displacements.reshape(-1)`` for an (N, 3) array.

Eigenpairs come from the Nystrom method on a vertex subset of size m with
uniform quadrature weights. With the counting measure over the N vertices,
eigenvalues are ``(N / m) * mu_i`` (``mu_i`` the eigenvalues of the subset
Gram matrix) and ``X = K_Nm U diag(mu)^(-1/2)``; for m = N this is exactly the
eigendecomposition of the full Gram matrix, ``X X^T = K``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .kernels import KernelSpec, kernel_block, spec_from_dict, spec_to_dict
from .meshcore import Mesh

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


def expand_to_3d(scalar_basis: np.ndarray, scalar_eigenvalues: np.ndarray, rank: Optional[int] = None):
    """Turn a scalar basis (N x q) into the vector basis (3N x 3q) of ``k * I_3``.

    Each scalar eigenpair yields three vector eigenpairs, one per axis, with
    columns ordered ``(pair 0: x, y, z), (pair 1: x, y, z), ...``.
    """
    n, q = scalar_basis.shape
    x = np.zeros((n, 3, q, 3))
    for a in range(3):
        x[:, a, :, a] = scalar_basis
    x = x.reshape(3 * n, 3 * q)
    ev = np.repeat(scalar_eigenvalues, 3)
    if rank is not None:
        x, ev = x[:, :rank], ev[:rank]
    return x, ev


def farthest_point_subset(mesh: Mesh, m: int, spec: Optional[KernelSpec] = None, start: int = 0) -> np.ndarray:
    """Deterministic farthest-point sample of ``m`` vertices.

    Uses geodesic distances when ``spec`` carries a geodesic field (sampling
    among its source vertices), Euclidean distances otherwise.
    """
    n = mesh.n_vertices
    if m >= n:
        return np.arange(n)
    field_ = spec.geodesics if spec is not None and spec.metric == "geodesic" else None
    if field_ is not None:
        cand = np.asarray(field_.sources)
        if m >= len(cand):
            return np.sort(cand)
        dist_rows = lambda i: field_.from_sources([cand[i]], cand)[0]  # noqa: E731
    else:
        cand = np.arange(n)
        pts = mesh.vertices
        dist_rows = lambda i: cdist(pts[i:i + 1], pts)[0]  # noqa: E731
    first = int(np.argmin(cand)) if start == 0 else int(np.flatnonzero(cand == start)[0])
    chosen = [first]
    mind = dist_rows(first)
    for _ in range(m - 1):
        mind[chosen] = -1.0
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, dist_rows(nxt))
    return np.sort(cand[chosen])


@dataclass(eq=False)
class LowRankGP:
    """Truncated Karhunen-Loeve model over the vertices of ``reference``.

    Attributes
    ----------
    eigenvalues : (r,) array, nonincreasing and positive
    basis : (3N, r) array
        Column i is ``sqrt(lambda_i) phi_i`` at the vertices.
    mean : (3N,) array
    truncation_error : float
        Estimated sum of the eigenvalues that were dropped.
    discarded : int
        Number of non-positive eigenvalues removed.
    """

    reference: Mesh
    eigenvalues: np.ndarray
    basis: np.ndarray
    mean: np.ndarray = None
    spec: Optional[KernelSpec] = None
    subset: Optional[np.ndarray] = None
    truncation_error: float = float("nan")
    discarded: int = 0

    def __post_init__(self):
        n3 = 3 * self.reference.n_vertices
        if self.mean is None:
            self.mean = np.zeros(n3)
        if self.basis.shape[0] != n3 or self.basis.shape[1] != len(self.eigenvalues):
            raise ModelError("basis shape does not match the reference mesh / eigenvalues")

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def displacement(self, alpha) -> np.ndarray:
        """Displacement field (N, 3) for coefficients ``alpha``."""
        alpha = np.asarray(alpha, dtype=np.float64).ravel()
        if len(alpha) != self.rank:
            raise ModelError(f"expected {self.rank} coefficients, got {len(alpha)}")
        return (self.mean + self.basis @ alpha).reshape(-1, 3)

    def instance(self, alpha) -> Mesh:
        return self.reference.with_vertices(self.reference.vertices + self.displacement(alpha))

    def covariance(self) -> np.ndarray:
        """Low-rank covariance ``X X^T`` (3N x 3N)."""
        return self.basis @ self.basis.T

    def save(self, path):
        np.savez(
            path,
            format_version=MODEL_FORMAT_VERSION,
            mesh_hash=self.reference.content_hash(),
            spec=json.dumps(spec_to_dict(self.spec)) if self.spec is not None else "",
            vertices=self.reference.vertices,
            faces=self.reference.faces,
            eigenvalues=self.eigenvalues,
            basis=self.basis,
            mean=self.mean,
            subset=self.subset if self.subset is not None else np.zeros(0, dtype=np.int64),
            truncation_error=self.truncation_error,
            discarded=self.discarded,
        )

    @classmethod
    def load(cls, path) -> "LowRankGP":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != MODEL_FORMAT_VERSION:
                raise ModelError(f"unsupported model format version {int(z['format_version'])}")
            ref = Mesh(z["vertices"], z["faces"], validate=False)
            if ref.content_hash() != str(z["mesh_hash"]):
                raise ModelError("reference mesh hash mismatch; file is corrupt")
            spec_s = str(z["spec"])
            return cls(
                ref,
                z["eigenvalues"].copy(),
                z["basis"].copy(),
                z["mean"].copy(),
                spec_from_dict(json.loads(spec_s)) if spec_s else None,
                z["subset"].copy() if len(z["subset"]) else None,
                float(z["truncation_error"]),
                int(z["discarded"]),
            )


def _kernel_diag_sum(spec: KernelSpec, mesh: Mesh) -> float:
    if spec.family == "squaredExponential":
        return mesh.n_vertices * spec.total_scale
    idx = np.arange(mesh.n_vertices)
    return float(sum(kernel_block(spec, mesh, [i], [i])[0, 0] for i in idx))


def build_low_rank(spec: KernelSpec, mesh: Mesh, rank: int = 1000, nystrom_size: Optional[int] = None,
                   subset: Optional[Sequence[int]] = None, rel_tol: float = 1e-12) -> LowRankGP:
    """Nystrom low-rank model of the GP with kernel ``spec`` on ``mesh``.

    Parameters
    ----------
    rank : int
        Requested number of vector basis functions r.
    nystrom_size : int, optional
        Subset size m (farthest-point sampled); default all vertices.
    subset : sequence of int, optional
        Explicit subset, overrides ``nystrom_size``.
    rel_tol : float
        Eigenvalues at or below ``rel_tol * largest`` count as non-positive and
        are discarded.
    """
    if rank < 1:
        raise ModelError("rank must be >= 1")
    n = mesh.n_vertices
    if subset is None:
        m = n if nystrom_size is None else int(nystrom_size)
        if m < 1 or m > n:
            raise ModelError(f"nystrom_size must be in [1, {n}]")
        subset = farthest_point_subset(mesh, m, spec)
    subset = np.asarray(subset, dtype=np.int64)
    m = len(subset)
    q = min(-(-rank // 3), m)

    kmm = kernel_block(spec, mesh, subset, subset)
    kmm = 0.5 * (kmm + kmm.T)
    mu, u = linalg.eigh(kmm, subset_by_index=(m - q, m - 1))
    mu, u = mu[::-1], u[:, ::-1]
    top = max(mu[0], 0.0)
    keep = mu > rel_tol * top
    discarded = int((~keep).sum())
    if not keep.all():
        # eigh returns ascending order, so the discarded ones are the trailing ones
        mu, u = mu[keep], u[:, keep]
    if len(mu) == 0:
        raise ModelError("kernel has no positive eigenvalues on the subset")
    if 3 * len(mu) < rank:
        msg = f"only {3 * len(mu)} positive eigenvalues available, requested rank {rank}"
        warnings.warn(msg)

    knm = kmm if m == n and np.array_equal(subset, np.arange(n)) else kernel_block(spec, mesh, np.arange(n), subset)
    if knm is kmm:
        xs = u * np.sqrt(mu)
    else:
        xs = (knm @ u) / np.sqrt(mu)
    lam = (n / m) * mu
    basis, ev = expand_to_3d(xs, lam, rank)
    tail = 3.0 * _kernel_diag_sum(spec, mesh) - ev.sum()
    return LowRankGP(mesh, ev, basis, None, spec, subset, float(tail), discarded)


def sample_shape(model: LowRankGP, alpha=None, seed: Optional[int] = None) -> Mesh:
    """Model instance for ``alpha``, or for ``alpha ~ N(0, I)`` drawn with ``seed``."""
    if alpha is None:
        alpha = np.random.default_rng(seed).standard_normal(model.rank)
    return model.instance(alpha)


def participation_ratio(field: np.ndarray) -> float:
    """Fraction of vertices effectively carrying a field: ``(sum a)^2 / (N sum a^2)``, ``a = |f|^2``.

    1 for a uniform magnitude, about k/N when concentrated on k vertices.
    """
    f = np.asarray(field, dtype=np.float64).reshape(-1, 3) if np.size(field) % 3 == 0 else np.asarray(field)
    a = (f ** 2).sum(axis=1) if f.ndim == 2 else f ** 2
    return float(a.sum() ** 2 / (len(a) * (a ** 2).sum()))


@dataclass(eq=False)
class PosteriorModel:
    """GP conditioned on noisy displacements at landmark vertices.

    Posterior mean ``u*(x) = k*(x)^T [K + s2 I]^-1 y`` and kernel
    ``k*(x, x') = k(x, x') - k*(x)^T [K + s2 I]^-1 k*(x')``, evaluated per axis
    since the kernel is scalar times I_3.
    """

    base: LowRankGP
    spec: KernelSpec
    landmark_indices: np.ndarray
    observations: np.ndarray
    noise_variance: float
    _factor: tuple = field(repr=False, default=None)
    _coef: np.ndarray = field(repr=False, default=None)

    @property
    def mesh(self) -> Mesh:
        return self.base.reference

    def _cross(self, vertices) -> np.ndarray:
        return kernel_block(self.spec, self.mesh, np.atleast_1d(vertices), self.landmark_indices)

    def mean_at(self, vertices=None) -> np.ndarray:
        """Posterior mean displacement (len(vertices), 3)."""
        vertices = np.arange(self.mesh.n_vertices) if vertices is None else np.atleast_1d(vertices)
        return self._cross(vertices) @ self._coef

    def variance_at(self, vertices) -> np.ndarray:
        """Posterior variance of each displacement component at ``vertices``."""
        vertices = np.atleast_1d(vertices)
        kx = self._cross(vertices)
        prior = np.array([kernel_block(self.spec, self.mesh, [v], [v])[0, 0] for v in vertices])
        return prior - np.einsum("ij,ji->i", kx, linalg.cho_solve(self._factor, kx.T))

    def kernel(self, i: int, j: int) -> float:
        ki, kj = self._cross([i]), self._cross([j])
        kij = kernel_block(self.spec, self.mesh, [i], [j])[0, 0]
        return float(kij - (ki @ linalg.cho_solve(self._factor, kj.T))[0, 0])

    def to_low_rank(self) -> LowRankGP:
        """Low-rank model usable in place of the prior.

        The mean is the exact posterior mean above; the basis is the posterior
        covariance of the rank-r prior, re-orthogonalized and kept at rank r.
        """
        x = self.base.basis
        rows = (3 * self.landmark_indices[:, None] + np.arange(3)[None, :]).ravel()
        lx = x[rows]
        r = x.shape[1]
        prec = np.eye(r) + lx.T @ lx / self.noise_variance
        w, v = linalg.eigh(prec)
        sqrt_cov = (v / np.sqrt(w)) @ v.T
        q, s, _ = linalg.svd(x @ sqrt_cov, full_matrices=False)
        mean = self.base.mean + self.mean_at().reshape(-1)
        return LowRankGP(self.mesh, s ** 2, q * s, mean, self.spec, self.base.subset,
                         self.base.truncation_error, self.base.discarded)


def condition_on_landmarks(model: LowRankGP, spec: KernelSpec, landmark_indices: Sequence[int],
                           displacements, noise_variance: Optional[float] = None) -> PosteriorModel:
    """Condition the GP on observed displacements (H, 3) at landmark vertices.

    ``noise_variance`` defaults to ``1e-4 * sum of kernel scales``.
    """
    idx = np.asarray(landmark_indices, dtype=np.int64).ravel()
    y = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    if len(idx) < 1:
        raise ModelError("at least one landmark is required")
    if len(y) != len(idx):
        raise ModelError("one displacement per landmark is required")
    s2 = 1e-4 * spec.total_scale if noise_variance is None else float(noise_variance)
    if not s2 > 0:
        raise ModelError("noise variance must be positive")
    k = kernel_block(spec, model.reference, idx, idx)
    k = 0.5 * (k + k.T) + s2 * np.eye(len(idx))
    try:
        factor = linalg.cho_factor(k, lower=True)
    except linalg.LinAlgError as exc:
        cond = np.linalg.cond(k)
        raise ModelError(f"landmark system is numerically singular (condition number {cond:.3g})") from exc
    coef = linalg.cho_solve(factor, y)
    return PosteriorModel(model, spec, idx, y, s2, factor, coef)
