"""Least-squares similarity alignment of landmark sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkError, LandmarkSet, landmark_pairs


@dataclass(frozen=True)
class Similarity:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(vectors) @ self.rotation.T

    def inverse(self) -> "Similarity":
        rt = self.rotation.T
        return Similarity(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(np.eye(3), np.zeros(3), 1.0)


def similarity_from_points(src: np.ndarray, dst: np.ndarray, rank_tol: float = 1e-9) -> Similarity:
    """Umeyama's closed form for ``argmin sum ||s R p_i + t - q_i||^2`` with det(R) = +1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise LandmarkError("point sets must both be (n, 3)")
    if len(src) < 3:
        raise LandmarkError(f"need at least 3 corresponding landmarks, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    ps, qd = src - mu_s, dst - mu_d
    sv_src = np.linalg.svd(ps, compute_uv=False)
    if sv_src[0] == 0 or sv_src[1] <= rank_tol * sv_src[0]:
        raise LandmarkError("landmarks are collinear or coincident; similarity is undetermined")
    cov = qd.T @ ps / len(src)
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= rank_tol * max(d[0], 1e-300):
        raise LandmarkError("cross-covariance has rank < 2; similarity is undetermined")
    sgn = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2] = -1.0
    rot = (u * sgn) @ vt
    var_s = (ps ** 2).sum() / len(src)
    scale = float((d * sgn).sum() / var_s)
    return Similarity(rot, mu_d - scale * rot @ mu_s, scale)


def similarity_align(source: LandmarkSet, target: LandmarkSet) -> Similarity:
    """Transform taking ``source`` landmarks onto ``target`` landmarks (matched by name)."""
    names, p, q = landmark_pairs(source, target)
    if len(names) < 3:
        raise LandmarkError(f"need at least 3 common landmarks, got {len(names)}")
    return similarity_from_points(p, q)
