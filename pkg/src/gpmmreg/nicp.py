"""Ridge-regression model fitting and the non-rigid ICP registration loop.

Fitting a low-rank model ``u = mu + X alpha`` to target displacements ``y``
with per-row confidence weights ``w`` minimizes

    R(alpha) = 1/2 ||W (y - X alpha)||^2 + rho/2 ||alpha||^2,   W = diag(w),

whose minimizer solves ``(X^T W^2 X + rho I) alpha = X^T W^2 y``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .gpmm import LowRankGP, PosteriorModel, condition_on_landmarks
from .kernels import KernelSpec
from .meshcore import LandmarkSet, Mesh, Similarity, get_bvh, similarity_from_points
from .meshcore.landmarks import landmark_pairs

log = logging.getLogger(__name__)

CONFIDENCE_SOURCES = ("uniform", "perVertexFile", "vertexColorSkinRule")


class RegistrationError(RuntimeError):
    pass


@dataclass
class RegressionProblem:
    """Targets ``y`` (3N), basis ``X`` (3N x r), ridge ``rho`` and optional row weights ``w`` (3N)."""

    y: np.ndarray
    basis: np.ndarray
    rho: float
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2 or self.basis.shape[0] != len(self.y):
            raise ValueError(f"basis shape {self.basis.shape} does not match {len(self.y)} targets")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
            if len(self.weights) != len(self.y):
                raise ValueError("one weight per target row is required")
            if np.any(self.weights < 0) or np.any(self.weights > 1):
                raise ValueError("weights must lie in [0, 1]")
        if not self.rho >= 0:
            raise ValueError("rho must be >= 0")


@dataclass(frozen=True)
class FitResult:
    alpha: np.ndarray
    energy: float
    residual_norm: float
    coefficient_norm: float


def _ridge_solve(x: np.ndarray, y: np.ndarray, rho: float) -> np.ndarray:
    a = x.T @ x
    a[np.diag_indices_from(a)] += rho
    b = x.T @ y
    try:
        fac = linalg.cho_factor(a, lower=False, check_finite=False)
        alpha = linalg.cho_solve(fac, b, check_finite=False)
        # one step of iterative refinement
        alpha += linalg.cho_solve(fac, b - a @ alpha, check_finite=False)
    except linalg.LinAlgError:
        alpha = linalg.lstsq(a, b)[0]
    return alpha


def fit_ridge(problem: RegressionProblem) -> FitResult:
    """Closed-form (weighted) ridge regression."""
    x, y, w = problem.basis, problem.y, problem.weights
    if not (np.isfinite(x).all() and np.isfinite(y).all()) or (w is not None and not np.isfinite(w).all()):
        raise ValueError("non-finite values in the regression problem")
    if w is None:
        alpha = _ridge_solve(x, y, problem.rho)
        res = y - x @ alpha
    else:
        alpha = _ridge_solve(w[:, None] * x, w * y, problem.rho)
        res = w * (y - x @ alpha)
    rn = float(np.linalg.norm(res))
    cn = float(np.linalg.norm(alpha))
    return FitResult(alpha, 0.5 * rn * rn + 0.5 * problem.rho * cn * cn, rn, cn)


def ridge_gradient(problem: RegressionProblem, alpha: np.ndarray) -> np.ndarray:
    """Gradient of the loss at ``alpha``."""
    w2 = 1.0 if problem.weights is None else problem.weights ** 2
    return -problem.basis.T @ (w2 * (problem.y - problem.basis @ alpha)) + problem.rho * alpha


def regression_energy(model: LowRankGP, target: Mesh, rho: float = 1.0) -> FitResult:
    """Fit the model to a target corresponding to the reference vertex by vertex."""
    ref = model.reference
    if target.n_vertices != ref.n_vertices:
        raise ValueError(f"target has {target.n_vertices} vertices, reference has {ref.n_vertices}")
    y = (target.vertices - ref.vertices).ravel() - model.mean
    return fit_ridge(RegressionProblem(y, model.basis, rho))


# ---------------------------------------------------------------- confidence


@dataclass(frozen=True)
class SkinRule:
    """RGB thresholds (0-255 scale) of a classic explicit skin-color rule."""

    r_min: float = 95.0
    g_min: float = 40.0
    b_min: float = 20.0
    spread_min: float = 15.0
    rg_diff_min: float = 15.0


def skin_confidence_from_colors(mesh: Mesh, rule: SkinRule = SkinRule(), smooth: bool = True) -> np.ndarray:
    """Per-vertex skin confidence in [0, 1] from vertex colors.

    A vertex is skin (1) when all rule tests pass, else 0; one averaging pass
    over each vertex and its one-ring follows.
    """
    if mesh.vertex_colors is None:
        raise ValueError("mesh has no vertex colors")
    c = 255.0 * np.asarray(mesh.vertex_colors, dtype=np.float64)
    r, g, b = c[:, 0], c[:, 1], c[:, 2]
    skin = (
        (r > rule.r_min) & (g > rule.g_min) & (b > rule.b_min)
        & (c.max(axis=1) - c.min(axis=1) > rule.spread_min)
        & (np.abs(r - g) > rule.rg_diff_min) & (r > g) & (r > b)
    ).astype(np.float64)
    if smooth:
        adj = mesh.adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        skin = (skin + adj @ skin) / (1.0 + deg)
    return np.clip(skin, 0.0, 1.0)


def read_weights(path, n: Optional[int] = None) -> np.ndarray:
    """Plaintext weights, one scalar per line; blank and ``#`` lines ignored."""
    vals = []
    with open(path) as fh:
        for k, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                vals.append(float(s))
            except ValueError:
                raise ValueError(f"{path}:{k}: not a number: {s!r}") from None
    w = np.array(vals)
    if n is not None and len(w) != n:
        raise ValueError(f"{path}: expected {n} weights, found {len(w)}")
    if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise ValueError(f"{path}: weights must lie in [0, 1]")
    return w


def write_weights(weights, path):
    with open(path, "w") as fh:
        for v in np.asarray(weights, dtype=np.float64).ravel().tolist():
            fh.write(f"{v!r}\n")


# ---------------------------------------------------------- correspondences


@dataclass
class RegistrationConfig:
    """NICP settings.

    ``distance_cutoff`` is in mm; ``"auto"`` means 5% of the target diameter
    and ``None`` disables the filter. ``rho_schedule`` defaults to
    ``outer_iterations`` values geometric from 10 to 0.01.
    """

    outer_iterations: int = 8
    rho_schedule: Optional[Sequence[float]] = None
    normal_angle_max: float = 60.0
    symmetric_filter: bool = True
    distance_cutoff: Union[float, str, None] = "auto"
    confidence_source: str = "uniform"
    use_posterior: bool = False
    noise_variance: Optional[float] = None

    def __post_init__(self):
        if self.rho_schedule is None:
            self.rho_schedule = tuple(np.geomspace(10.0, 0.01, self.outer_iterations))
        self.rho_schedule = tuple(float(r) for r in self.rho_schedule)
        if not self.rho_schedule:
            raise ValueError("rho schedule must be nonempty")
        if any(b > a for a, b in zip(self.rho_schedule, self.rho_schedule[1:])):
            raise ValueError("rho schedule must be nonincreasing")
        if any(r < 0 for r in self.rho_schedule):
            raise ValueError("rho values must be >= 0")
        self.outer_iterations = len(self.rho_schedule)
        if not 0 < self.normal_angle_max <= 180:
            raise ValueError("normal_angle_max must be in (0, 180]")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ValueError(f"confidence source must be one of {CONFIDENCE_SOURCES}")
        if isinstance(self.distance_cutoff, str) and self.distance_cutoff != "auto":
            raise ValueError("distance_cutoff must be a number, 'auto' or None")

    def cutoff_for(self, target: Mesh) -> Optional[float]:
        if self.distance_cutoff == "auto":
            return 0.05 * target.diameter
        return None if self.distance_cutoff is None else float(self.distance_cutoff)


@dataclass
class CorrespondenceSet:
    """Closest-point pairs for every template vertex; ``kept`` marks the surviving ones."""

    target_points: np.ndarray
    target_normals: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    kept: np.ndarray
    dropped_normal: int = 0
    dropped_symmetric: int = 0
    dropped_distance: int = 0

    @property
    def source_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def empty(self) -> bool:
        return self.n_kept == 0


def mutual_nearest(template: Mesh, target: Mesh) -> np.ndarray:
    """Template vertices whose nearest target vertex maps back into their closed one-ring."""
    fwd = cKDTree(target.vertices).query(template.vertices)[1]
    back = cKDTree(template.vertices).query(target.vertices[fwd])[1]
    idx = np.arange(template.n_vertices)
    ok = back == idx
    adj = template.adjacency().tocsr()
    rest = np.flatnonzero(~ok)
    if len(rest):
        ok[rest] = np.asarray(adj[rest, back[rest]]).ravel() != 0
    return ok


def find_correspondences(template: Mesh, target: Mesh, config: RegistrationConfig = None,
                         target_confidence: Optional[np.ndarray] = None) -> CorrespondenceSet:
    """Closest target point for every template vertex, then filtering.

    ``target_confidence`` holds per-target-vertex weights in [0, 1]; the weight of
    a pair is interpolated barycentrically at its target point.
    """
    config = config or RegistrationConfig()
    hit = get_bvh(target).query(template.vertices)
    kept = np.ones(template.n_vertices, dtype=bool)
    cosang = np.einsum("ij,ij->i", template.vertex_normals, hit.normals)
    normal_ok = cosang >= np.cos(np.radians(config.normal_angle_max)) - 1e-12
    kept &= normal_ok
    n_norm = int((~normal_ok).sum())
    n_sym = 0
    if config.symmetric_filter:
        sym_ok = mutual_nearest(template, target)
        n_sym = int((kept & ~sym_ok).sum())
        kept &= sym_ok
    n_dist = 0
    cutoff = config.cutoff_for(target)
    if cutoff is not None:
        dist_ok = hit.distances <= cutoff
        n_dist = int((kept & ~dist_ok).sum())
        kept &= dist_ok
    if target_confidence is None:
        w = np.ones(template.n_vertices)
    else:
        conf = np.asarray(target_confidence, dtype=np.float64)
        if len(conf) != target.n_vertices:
            raise ValueError("one confidence value per target vertex is required")
        w = np.einsum("ij,ij->i", hit.barycentric, conf[target.faces[hit.faces]])
    w = np.where(kept, np.clip(w, 0.0, 1.0), 0.0)
    return CorrespondenceSet(hit.points, hit.normals, hit.distances, w, kept, n_norm, n_sym, n_dist)


# ------------------------------------------------------------- registration


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    rho: float
    pairs_kept: int
    fit: FitResult


@dataclass
class RegistrationResult:
    """Deformed template plus the per-iteration trace and final coefficients."""

    mesh: Mesh
    trace: List[IterationRecord]
    alpha: np.ndarray
    transform: Similarity
    model: LowRankGP
    correspondences: Optional[CorrespondenceSet] = field(default=None, repr=False)

    def __iter__(self):
        # allows ``mesh, trace = register_nicp(...)``
        return iter((self.mesh, self.trace))


def _posed_basis(basis: np.ndarray, sim: Similarity) -> np.ndarray:
    n3, r = basis.shape
    lin = sim.scale * sim.rotation
    return np.einsum("ab,nbr->nar", lin, basis.reshape(n3 // 3, 3, r)).reshape(n3, r)


def _template_landmark_indices(template: Mesh, lms: LandmarkSet, names: Sequence[str]) -> np.ndarray:
    out = []
    tree = None
    for nm in names:
        vi = lms.vertex_index(nm)
        if vi is None:
            if tree is None:
                tree = cKDTree(template.vertices)
            vi = int(tree.query(lms.position(nm))[1])
        out.append(vi)
    return np.array(out, dtype=np.int64)


def register_nicp(prior: Union[LowRankGP, PosteriorModel], target: Mesh,
                  landmarks: Optional[Tuple[LandmarkSet, LandmarkSet]] = None,
                  config: Optional[RegistrationConfig] = None,
                  target_confidence: Optional[np.ndarray] = None,
                  spec: Optional[KernelSpec] = None) -> RegistrationResult:
    """Fit the model's reference mesh (the template) to ``target``.

    Parameters
    ----------
    prior : LowRankGP or PosteriorModel
    landmarks : (template landmarks, target landmarks), optional
        With at least 3 common names, a similarity transform initializes the
        pose; with ``config.use_posterior`` the model is also conditioned on the
        landmark displacements remaining after that alignment.
    target_confidence : per-target-vertex weights in [0, 1], optional
    spec : kernel of the prior; needed for posterior conditioning when
        ``prior`` does not carry one.
    """
    config = config or RegistrationConfig()
    model = prior.to_low_rank() if isinstance(prior, PosteriorModel) else prior
    template = model.reference
    sim = Similarity.identity()
    if landmarks is not None:
        names, p, q = landmark_pairs(*landmarks)
        if len(names) < 3:
            raise RegistrationError(f"need at least 3 common landmarks, got {len(names)}")
        sim = similarity_from_points(p, q)
        if config.use_posterior:
            spec = spec or model.spec
            if spec is None:
                raise RegistrationError("posterior conditioning needs the prior kernel")
            idx = _template_landmark_indices(template, landmarks[0], names)
            # residual displacement after alignment, expressed in the reference frame
            resid = sim.inverse().apply(q) - template.vertices[idx]
            post = condition_on_landmarks(model, spec, idx, resid, config.noise_variance)
            model = post.to_low_rank()

    ref_posed = sim.apply(template.vertices)
    basis = _posed_basis(model.basis, sim)
    mean = sim.apply_vectors(model.mean.reshape(-1, 3)).ravel()
    alpha = np.zeros(model.rank)
    trace: List[IterationRecord] = []
    corr = None
    for it, rho in enumerate(config.rho_schedule):
        current = ref_posed + (mean + basis @ alpha).reshape(-1, 3)
        corr = find_correspondences(template.with_vertices(current), target, config, target_confidence)
        if corr.empty:
            raise RegistrationError(
                f"iteration {it}: all correspondences filtered out (normal {corr.dropped_normal}, "
                f"symmetric {corr.dropped_symmetric}, distance {corr.dropped_distance})"
            )
        y = (corr.target_points - ref_posed).ravel() - mean
        w = np.repeat(corr.weights, 3)
        y[w == 0] = 0.0
        fit = fit_ridge(RegressionProblem(y, basis, rho, w))
        alpha = fit.alpha
        trace.append(IterationRecord(it, rho, corr.n_kept, fit))
        log.debug("iteration %d rho %.4g kept %d energy %.6g", it, rho, corr.n_kept, fit.energy)
    final = template.with_vertices(ref_posed + (mean + basis @ alpha).reshape(-1, 3))
    return RegistrationResult(final, trace, alpha, sim, model, corr)


TRACE_COLUMNS = ("iteration", "rho", "pairsKept", "residualNorm", "coeffNorm", "energy")


def write_trace(trace: Sequence[IterationRecord], path, header: Optional[dict] = None):
    """CSV trace with optional ``# key: value`` provenance lines."""
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACE_COLUMNS)
        for rec in trace:
            f = rec.fit
            wr.writerow([rec.iteration, repr(float(rec.rho)), rec.pairs_kept,
                         repr(float(f.residual_norm)), repr(float(f.coefficient_norm)), repr(float(f.energy))])
