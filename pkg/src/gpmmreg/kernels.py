"""Scalar covariance kernels over mesh vertices and their Gram matrices.

Every kernel here is ``k(x, y) * I_3``; only the scalar part is evaluated.
Supported: squared exponential over Euclidean or geodesic distance, and the
tensor-product cubic B-spline kernel, each optionally summed over levels.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .geodesics import GeodesicField
from .meshcore import Mesh

METRICS = ("euclidean", "geodesic")
FAMILIES = ("squaredExponential", "bspline")

# mean over a unit cell of (sum_k b3(u - k)**2)**3, i.e. the average B-spline kernel variance for s = 1
BSPLINE_MEAN_VARIANCE = (151.0 / 315.0) ** 3


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel: ``sum_l scale_l * k(x, y; sigma_l)``.

    Parameters
    ----------
    metric : {"euclidean", "geodesic"}
    family : {"squaredExponential", "bspline"}
    levels : tuple of (sigma, scale)
        Lengthscale (SE) or support width (B-spline) in mm, and weight.
    geodesics : GeodesicField, optional
        Required for the geodesic metric; kernels are then only evaluated
        between pairs in which at least one vertex is a cached source.
    """

    metric: str = "euclidean"
    family: str = "squaredExponential"
    levels: Tuple[Tuple[float, float], ...] = ((25.0, 1.0),)
    geodesics: Optional[GeodesicField] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        levels = tuple((float(s), float(w)) for s, w in self.levels)
        object.__setattr__(self, "levels", levels)
        if self.metric not in METRICS:
            raise KernelError(f"unknown metric {self.metric!r}")
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if not levels:
            raise KernelError("a kernel needs at least one level")
        if any(s <= 0 or w <= 0 for s, w in levels):
            raise KernelError("all sigmas and scales must be positive")
        if self.family == "bspline" and self.metric != "euclidean":
            raise KernelError("the B-spline kernel is only defined for the euclidean metric")

    @property
    def sigmas(self) -> Tuple[float, ...]:
        return tuple(s for s, _ in self.levels)

    @property
    def total_scale(self) -> float:
        return sum(w for _, w in self.levels)

    @property
    def name(self) -> str:
        base = {"squaredExponential": "se", "bspline": "bspline"}[self.family]
        label = base if self.family == "bspline" else f"{self.metric}-{base}"
        return label + ("-multiscale" if len(self.levels) > 1 else "")

    def with_sigma(self, sigma: float) -> "KernelSpec":
        """Rescale all levels so the first lengthscale becomes ``sigma``."""
        f = sigma / self.levels[0][0]
        return replace(self, levels=tuple((s * f, w) for s, w in self.levels))

    def with_geodesics(self, field: Optional[GeodesicField]) -> "KernelSpec":
        return replace(self, geodesics=field)

    def level(self, i: int) -> "KernelSpec":
        return replace(self, levels=(self.levels[i],))


def make_multiscale(base: KernelSpec, level_count: int = 4, level_ratio: float = 2.0,
                    weight_ratio: float = 2.0) -> KernelSpec:
    """Expand the first level of ``base`` into ``level_count`` levels.

    ``sigma_n = level_ratio * sigma_{n-1}`` and ``scale_n = weight_ratio * scale_{n-1}``.
    """
    if level_count < 1:
        raise KernelError("level_count must be >= 1")
    s0, w0 = base.levels[0]
    levels = tuple((s0 * level_ratio ** n, w0 * weight_ratio ** n) for n in range(level_count))
    return replace(base, levels=levels)


def b3(x):
    """Centred cubic B-spline, support (-2, 2)."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(a < 1.0, 2.0 / 3.0 - a ** 2 + 0.5 * a ** 3, np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0))


def _bspline_axis_block(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``S[i, j] = sum_k b3(u_i - k) b3(w_j - k)`` for one axis (k over all integers)."""
    lo = int(np.floor(min(u.min(), w.min()))) - 2
    hi = int(np.floor(max(u.max(), w.max()))) + 3
    k = np.arange(lo, hi + 1)
    bu = b3(u[:, None] - k[None, :])
    bw = b3(w[:, None] - k[None, :])
    return bu @ bw.T


def bspline_block(xa: np.ndarray, xb: np.ndarray, sigma: float) -> np.ndarray:
    """Unit-scale B-spline kernel ``sum_k zeta(x/sigma - k) zeta(y/sigma - k)`` between point sets.

    The lattice sum factorizes over the three axes because ``zeta`` is a product.
    """
    xa = np.atleast_2d(xa) / sigma
    xb = np.atleast_2d(xb) / sigma
    out = np.ones((len(xa), len(xb)))
    for a in range(3):
        out *= _bspline_axis_block(xa[:, a], xb[:, a])
    return out


def bspline_kernel(spec: KernelSpec, xi, xj) -> float:
    """B-spline kernel between two 3-vectors (summed over levels)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(1, 3)
    xj = np.asarray(xj, dtype=np.float64).reshape(1, 3)
    return float(sum(w * bspline_block(xi, xj, s)[0, 0] for s, w in spec.levels))


def _pair_distances(spec: KernelSpec, mesh: Mesh, rows, cols) -> np.ndarray:
    if spec.metric == "euclidean":
        return cdist(mesh.vertices[rows], mesh.vertices[cols])
    if spec.geodesics is None:
        raise KernelError("geodesic kernel evaluated without a geodesic field")
    if spec.geodesics.n_vertices != mesh.n_vertices:
        raise KernelError("geodesic field does not match the mesh")
    try:
        return spec.geodesics.between(rows, cols)
    except KeyError as exc:
        raise KernelError(f"missing geodesic cache entry: {exc.args[0]}") from None


def kernel_block(spec: KernelSpec, mesh: Mesh, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    """Scalar kernel matrix ``k(x_rows[i], x_cols[j])``."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
    if spec.family == "bspline":
        a, b = mesh.vertices[rows], mesh.vertices[cols]
        return sum(w * bspline_block(a, b, s) for s, w in spec.levels)
    d = _pair_distances(spec, mesh, rows, cols)
    d2 = d * d
    return sum(w * np.exp(-d2 / (2.0 * s * s)) for s, w in spec.levels)


def eval_kernel(spec: KernelSpec, i: int, j: int, mesh: Mesh) -> float:
    """Scalar kernel value between vertices ``i`` and ``j``; the full kernel is this times I_3."""
    return float(kernel_block(spec, mesh, [i], [j])[0, 0])


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    spec: KernelSpec
    vertex_ids: np.ndarray

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in descending order."""
        return np.linalg.eigvalsh(self.values)[::-1]

    def negative_eigenvalues(self, rel_tol: float = 1e-8) -> np.ndarray:
        """Eigenvalues below ``-rel_tol * max eigenvalue`` (roundoff-level ones are ignored)."""
        ev = self.eigenvalues()
        return ev[ev < -rel_tol * max(ev[0], 0.0)]

    def is_psd(self, rel_tol: float = 1e-8) -> bool:
        return len(self.negative_eigenvalues(rel_tol)) == 0


def assemble_gram(spec: KernelSpec, mesh: Mesh, subset: Optional[Sequence[int]] = None) -> GramMatrix:
    """Gram matrix over ``subset`` (default: all vertices), exactly symmetric."""
    ids = np.arange(mesh.n_vertices) if subset is None else np.asarray(subset, dtype=np.int64)
    k = kernel_block(spec, mesh, ids, ids)
    k = 0.5 * (k + k.T)
    if spec.family == "squaredExponential":
        diag = np.diag(k)
        if not np.allclose(diag, spec.total_scale, rtol=1e-9, atol=0.0):
            raise KernelError("Gram diagonal differs from the total kernel scale")
    return GramMatrix(k, spec, ids)


# lengthscales reported as optimal for face registration; documentation/config only
PRESETS = {
    "euclidean-se": KernelSpec("euclidean", "squaredExponential", ((25.0, 1.0),)),
    "geodesic-se": KernelSpec("geodesic", "squaredExponential", ((45.0, 1.0),)),
    "bspline": KernelSpec("euclidean", "bspline", ((70.0, 1.0),)),
    "euclidean-se-multiscale": make_multiscale(KernelSpec("euclidean", "squaredExponential", ((11.0, 1.0),))),
    "geodesic-se-multiscale": make_multiscale(KernelSpec("geodesic", "squaredExponential", ((35.0, 1.0),))),
    "bspline-multiscale": make_multiscale(KernelSpec("euclidean", "bspline", ((40.0, 1.0),))),
}


def read_kernel_config(path) -> KernelSpec:
    """Read a ``[kernel]`` key-value file.

    Keys: ``family``, ``metric``, ``sigma``, ``scale``, ``levels``,
    ``level_ratio`` and optionally ``weight_ratio`` (defaults to ``level_ratio``)
    or ``preset`` (a name from :data:`PRESETS`, overridable by the other keys).
    """
    cp = configparser.ConfigParser()
    with open(path) as fh:
        text = fh.read()
    if not text.lstrip().startswith("["):
        text = "[kernel]\n" + text
    cp.read_string(text)
    sec = cp["kernel"]
    base = PRESETS[sec["preset"]] if "preset" in sec else KernelSpec()
    sigma = sec.getfloat("sigma", base.levels[0][0])
    scale = sec.getfloat("scale", base.levels[0][1])
    spec = KernelSpec(sec.get("metric", base.metric), sec.get("family", base.family), ((sigma, scale),))
    levels = sec.getint("levels", len(base.levels))
    ratio = sec.getfloat("level_ratio", 2.0)
    return make_multiscale(spec, levels, ratio, sec.getfloat("weight_ratio", ratio))


def write_kernel_config(spec: KernelSpec, path):
    s0, w0 = (float(x) for x in spec.levels[0])
    ratio = float(spec.levels[1][0]) / s0 if len(spec.levels) > 1 else 2.0
    wratio = float(spec.levels[1][1]) / w0 if len(spec.levels) > 1 else ratio
    with open(path, "w") as fh:
        fh.write("[kernel]\n")
        fh.write(f"family = {spec.family}\nmetric = {spec.metric}\n")
        fh.write(f"sigma = {s0!r}\nscale = {w0!r}\nlevels = {len(spec.levels)}\n")
        fh.write(f"level_ratio = {ratio!r}\nweight_ratio = {wratio!r}\n")


def spec_to_dict(spec: KernelSpec) -> dict:
    return {"metric": spec.metric, "family": spec.family, "levels": [list(l) for l in spec.levels]}


def spec_from_dict(d: dict) -> KernelSpec:
    return KernelSpec(d["metric"], d["family"], tuple(tuple(l) for l in d["levels"]))
