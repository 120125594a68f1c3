"""Experiment harness: sigma grid search, per-category energy statistics,
eigenfunction export and synthetic deformation targets."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..gpmm import LowRankGP, build_low_rank
from ..kernels import BSPLINE_MEAN_VARIANCE, KernelSpec, make_multiscale
from ..meshcore import Mesh, load_mesh, save_mesh
from ..nicp import regression_energy
from .synth import slit_sides

log = logging.getLogger(__name__)

MESH_SUFFIXES = (".ply", ".obj")


# ------------------------------------------------------------ grid search


@dataclass
class GridSearchSpec:
    """Sigma sweep of one kernel family over targets whose energies are summed.

    ``kernel`` supplies metric, family and scale; its sigma is replaced by each
    grid value (the first level's sigma when ``multiscale``).
    """

    kernel: KernelSpec
    sigma_grid: Sequence[float]
    targets: Sequence[Mesh]
    rho: float = 1.0
    rank: int = 200
    multiscale: bool = False
    nystrom_size: Optional[int] = None

    def __post_init__(self):
        self.sigma_grid = [float(s) for s in self.sigma_grid]
        if not self.sigma_grid:
            raise ValueError("sigma grid must be nonempty")
        if any(b <= a for a, b in zip(self.sigma_grid, self.sigma_grid[1:])):
            raise ValueError("sigma grid must be strictly ascending")
        if not self.targets:
            raise ValueError("at least one target is required")

    def kernel_at(self, sigma: float) -> KernelSpec:
        spec = self.kernel.with_sigma(sigma)
        return make_multiscale(spec.level(0), 4, 2.0, 2.0) if self.multiscale else spec


@dataclass
class GridPoint:
    sigma: float
    energy: float
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class GridSearchResult:
    best_sigma: float
    curve: List[GridPoint]

    @property
    def best_energy(self) -> float:
        return min(p.energy for p in self.curve if p.ok)


ModelFactory = Callable[[KernelSpec, Mesh, int], LowRankGP]


def default_factory(nystrom_size: Optional[int] = None) -> ModelFactory:
    def build(spec, mesh, rank):
        return build_low_rank(spec, mesh, rank, nystrom_size)
    return build


def caching_factory(nystrom_size: Optional[int] = None) -> ModelFactory:
    """Like :func:`default_factory` but reuses models built for an identical kernel, mesh and rank."""
    cache: Dict[tuple, LowRankGP] = {}

    def build(spec, mesh, rank):
        key = (spec, id(spec.geodesics), mesh.content_hash(), rank)
        if key not in cache:
            cache[key] = build_low_rank(spec, mesh, rank, nystrom_size)
        return cache[key]
    return build


def grid_search(spec: GridSearchSpec, reference: Mesh, factory: Optional[ModelFactory] = None) -> GridSearchResult:
    """Summed regression energy over the targets for every sigma.

    A failed model build is recorded as a NaN point with its error message.
    """
    factory = factory or default_factory(spec.nystrom_size)
    for t in spec.targets:
        if t.n_vertices != reference.n_vertices:
            raise ValueError("all targets must share the reference vertex count")
    curve = []
    for sigma in spec.sigma_grid:
        try:
            model = factory(spec.kernel_at(sigma), reference, spec.rank)
            total = sum(regression_energy(model, t, spec.rho).energy for t in spec.targets)
            curve.append(GridPoint(sigma, float(total)))
        except Exception as exc:  # a single bad grid point must not abort the sweep
            log.warning("grid point sigma=%g failed: %s", sigma, exc)
            curve.append(GridPoint(sigma, math.nan, f"{type(exc).__name__}: {exc}"))
    good = [p for p in curve if p.ok]
    if not good:
        raise RuntimeError("every grid point failed")
    best = min(good, key=lambda p: p.energy)
    return GridSearchResult(best.sigma, curve)


# ------------------------------------------------------------ energy report


@dataclass(frozen=True)
class EnergyRow:
    category: str
    kernel: str
    mean: float
    std: float
    count: int
    best: bool = False


@dataclass
class EnergyReport:
    rows: List[EnergyRow] = field(default_factory=list)

    def best_kernel(self, category: str) -> str:
        return next(r.kernel for r in self.rows if r.category == category and r.best)

    def row(self, category: str, kernel: str) -> EnergyRow:
        return next(r for r in self.rows if r.category == category and r.kernel == kernel)

    @property
    def categories(self) -> List[str]:
        return list(dict.fromkeys(r.category for r in self.rows))


def energy_by_category(models: Dict[str, LowRankGP], dataset: Dict[str, Sequence[Mesh]],
                       rho: float = 1.0) -> EnergyReport:
    """Mean and (population) standard deviation of R per category and kernel.

    The kernel with the lowest mean is flagged per category; empty categories
    are skipped with a warning.
    """
    report = EnergyReport()
    for cat, meshes in dataset.items():
        if not meshes:
            log.warning("category %r is empty; skipped", cat)
            continue
        rows = []
        for name, model in models.items():
            e = np.array([regression_energy(model, m, rho).energy for m in meshes])
            rows.append(EnergyRow(cat, name, float(e.mean()), float(e.std()), len(e)))
        best = min(range(len(rows)), key=lambda k: rows[k].mean)
        rows[best] = EnergyRow(**{**rows[best].__dict__, "best": True})
        report.rows.extend(rows)
    return report


def load_dataset(directory) -> Dict[str, List[Mesh]]:
    """Category-labelled meshes: one subdirectory per category holding PLY/OBJ files.

    Categories and files are taken in sorted order.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    out = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in sub.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
        out[sub.name] = [load_mesh(p) for p in files]
    return out


# -------------------------------------------------------- eigenfunctions


def eigenfunction_colors(model: LowRankGP, index: int) -> np.ndarray:
    """RGB in [0, 1] from the 3-vector field of basis column ``index``, each axis normalized separately."""
    if not 0 <= index < model.rank:
        raise IndexError(f"eigenfunction index {index} outside [0, {model.rank})")
    v = model.basis[:, index].reshape(-1, 3)
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = hi - lo
    tol = 1e-12 * max(np.abs(v).max(), 1e-300)
    out = np.full_like(v, 0.5)
    ok = span > tol
    out[:, ok] = (v[:, ok] - lo[ok]) / span[ok]
    return out


def export_eigenfunctions(model: LowRankGP, indices: Sequence[int], out_dir, prefix: str = "eigen") -> List[Path]:
    """One colored PLY per requested basis column."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in indices:
        colors = eigenfunction_colors(model, int(i))
        p = out_dir / f"{prefix}_{int(i):04d}.ply"
        save_mesh(model.reference.with_colors(colors), p)
        paths.append(p)
    return paths


# ------------------------------------------------------ synthetic targets


def mouth_opening(mesh: Mesh, amount: float, slit_length: float = 40.0, falloff: float = 10.0,
                  slit_y: float = 0.0, upper_ratio: float = 1.0 / 3.0) -> Mesh:
    """Open a slit: the lower lip moves down by ``amount``, the upper lip up by ``upper_ratio * amount``.

    The displacement is ``cos^2(pi x / L) exp(-(y - y0)^2 / falloff^2)`` in
    shape, vanishing at the slit ends, so the field is discontinuous only
    across the slit itself.
    """
    v = mesh.vertices
    side = slit_sides(mesh, slit_y)
    x, dy = v[:, 0], v[:, 1] - slit_y
    c = np.where(np.abs(x) < slit_length / 2, np.cos(np.pi * x / slit_length) ** 2, 0.0)
    prof = c * np.exp(-(dy / falloff) ** 2)
    disp = np.zeros_like(v)
    disp[:, 1] = np.where(side < 0, -amount, np.where(side > 0, upper_ratio * amount, 0.0)) * prof
    return mesh.with_vertices(v + disp)


def smooth_bump(mesh: Mesh, height: float, center=(0.0, 30.0), width: float = 15.0) -> Mesh:
    """Gaussian bump along z centred at ``center`` (x, y)."""
    v = mesh.vertices
    r2 = ((v[:, :2] - np.asarray(center)) ** 2).sum(axis=1)
    disp = np.zeros_like(v)
    disp[:, 2] = height * np.exp(-r2 / (2 * width ** 2))
    return mesh.with_vertices(v + disp)


SKIN_RGB = (0.8, 0.55, 0.45)
HAIR_RGB = (0.05, 0.05, 0.05)


def hair_patch(mesh: Mesh, center=(0.0, 62.0), radius: float = 20.0, height: float = 20.0,
               margin: float = 6.0) -> Tuple[Mesh, np.ndarray]:
    """Outlier patch: a bump of ``height`` mm along the normals inside ``radius``.

    Vertices within ``radius + margin`` (in the x-y plane) are colored black,
    all others skin tone. Returns the colored target and the patch mask.
    """
    v = mesh.vertices
    r = np.linalg.norm(v[:, :2] - np.asarray(center), axis=1)
    bump = np.where(r < radius, height * np.exp(-2.0 * (r / radius) ** 2), 0.0)
    patch = r < radius + margin
    colors = np.tile(SKIN_RGB, (mesh.n_vertices, 1))
    colors[patch] = HAIR_RGB
    return mesh.with_vertices(v + bump[:, None] * mesh.vertex_normals).with_colors(colors), patch


def opening_category(mesh: Mesh, amounts=(4.0, 6.0, 8.0, 10.0), falloffs=(8.0, 12.0)) -> List[Mesh]:
    return [mouth_opening(mesh, a, falloff=f) for a in amounts for f in falloffs]


def bump_category(mesh: Mesh, heights=(4.0, 8.0), centers=((0.0, 30.0), (-25.0, 30.0), (25.0, -30.0)),
                  width: float = 10.0) -> List[Mesh]:
    """Bumps kept about 3 widths away from both the slit and the outer boundary."""
    return [smooth_bump(mesh, h, c, width) for h in heights for c in centers]


def comparison_kernels(scale: float = 100.0) -> Dict[str, KernelSpec]:
    """Euclidean SE, geodesic SE and a B-spline kernel of matched mean variance."""
    return {
        "euclidean-se": KernelSpec("euclidean", "squaredExponential", ((25.0, scale),)),
        "geodesic-se": KernelSpec("geodesic", "squaredExponential", ((45.0, scale),)),
        "bspline": KernelSpec("euclidean", "bspline", ((70.0, scale / BSPLINE_MEAN_VARIANCE),)),
    }
