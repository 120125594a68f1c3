import warnings

import numpy as np
import pytest
from scipy import linalg

from gpmmreg.geodesics import build_operators, pairwise_geodesics
from gpmmreg.gpmm import (LowRankGP, ModelError, build_low_rank, condition_on_landmarks, expand_to_3d,
                          farthest_point_subset, participation_ratio, sample_shape)
from gpmmreg.kernels import KernelSpec, assemble_gram, kernel_block

SE30 = KernelSpec("euclidean", "squaredExponential", ((30.0, 2.0),))


@pytest.fixture(scope="module")
def dense(small_plane):
    k = assemble_gram(SE30, small_plane).values
    w, v = np.linalg.eigh(k)
    return k, w[::-1], v[:, ::-1]


def test_expand_to_3d_layout():
    phi = np.arange(6.0).reshape(3, 2)
    x, ev = expand_to_3d(phi, np.array([5.0, 2.0]))
    assert x.shape == (9, 6)
    assert np.array_equal(ev, [5, 5, 5, 2, 2, 2])
    # column 4 is pair 1 along y: nonzero only at the y rows
    assert np.array_equal(x[:, 4], [0, 1, 0, 0, 3, 0, 0, 5, 0])
    x2, ev2 = expand_to_3d(phi, np.array([5.0, 2.0]), rank=4)
    assert x2.shape == (9, 4) and len(ev2) == 4


def test_full_nystrom_matches_dense_eigensystem(small_plane, dense):
    k, w, v = dense
    n = small_plane.n_vertices
    model = build_low_rank(SE30, small_plane, rank=3 * 40)
    lam = model.eigenvalues[::3]
    assert np.max(np.abs(lam - w[:40]) / w[:40]) < 1e-8
    phi = model.basis[0::3, 0::3] / np.sqrt(lam)
    # compare subspaces up to a spectral gap so degenerate pairs are not split
    gaps = np.flatnonzero(np.diff(w[:41]) / w[1:41] < -1e-3)
    for cut in (gaps[gaps >= 5][0] + 1, gaps[gaps >= 20][0] + 1):
        ang = linalg.subspace_angles(phi[:, :cut], v[:, :cut])
        assert ang.max() < 1e-6
    assert phi.shape == (n, 40)


def test_subset_nystrom_near_optimal_low_rank(small_plane, dense):
    k, w, v = dense
    q = 20
    optimal = np.linalg.norm(k - (v[:, :q] * w[:q]) @ v[:, :q].T)
    for m in (40, 80, 160):
        model = build_low_rank(SE30, small_plane, rank=3 * q, nystrom_size=m)
        x = model.basis[0::3, 0::3]
        err = np.linalg.norm(k - x @ x.T)
        # Eckart-Young: no rank-q approximation beats the truncated eigensystem
        assert optimal <= err + 1e-9 < 1.3 * optimal


def test_complete_basis_reproduces_kernel(small_plane, dense):
    k = dense[0]
    n = small_plane.n_vertices
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = build_low_rank(SE30, small_plane, rank=3 * n)
    cov = model.covariance()
    full = np.kron(k, np.eye(3))
    assert np.linalg.norm(cov - full) / np.linalg.norm(full) < 1e-8
    assert abs(model.truncation_error) < 1e-8 * np.trace(full)


def test_truncation_error_and_eigen_order(small_plane):
    model = build_low_rank(SE30, small_plane, rank=30)
    assert model.truncation_error == pytest.approx(3 * 200 * 2.0 - model.eigenvalues.sum())
    assert np.all(np.diff(model.eigenvalues) <= 0) and np.all(model.eigenvalues > 0)
    assert model.rank == 30


def test_rank_warning_when_spectrum_exhausted(small_plane):
    tiny = KernelSpec(levels=((300.0, 1.0),))
    with pytest.warns(UserWarning, match="positive eigenvalues"):
        model = build_low_rank(tiny, small_plane, rank=600, nystrom_size=200)
    assert model.discarded > 0
    assert model.rank < 600


def test_build_errors(small_plane):
    with pytest.raises(ModelError):
        build_low_rank(SE30, small_plane, rank=0)
    with pytest.raises(ModelError):
        build_low_rank(SE30, small_plane, nystrom_size=10 ** 5)


def test_farthest_point_subset(small_plane):
    s = farthest_point_subset(small_plane, 4)
    # start vertex 0 is a corner; the opposite corner is farthest from it
    assert {0, 199} <= set(s.tolist()) and len(set(s.tolist())) == 4
    assert np.array_equal(farthest_point_subset(small_plane, 500), np.arange(200))


def test_geodesic_model_on_subset(small_plane):
    ops = build_operators(small_plane)
    field = pairwise_geodesics(ops, np.arange(0, 200, 2))
    spec = KernelSpec("geodesic", "squaredExponential", ((30.0, 1.0),)).with_geodesics(field)
    model = build_low_rank(spec, small_plane, rank=12, nystrom_size=50)
    assert set(model.subset.tolist()) <= set(field.sources.tolist())
    assert np.all(model.eigenvalues > 0)


def test_localization_decreases_with_sigma(face_mesh):
    pr = {}
    for sigma in (19.0, 150.0):
        model = build_low_rank(KernelSpec(levels=((sigma, 1.0),)), face_mesh, rank=3, nystrom_size=400)
        pr[sigma] = participation_ratio(model.basis[:, 0])
    assert pr[19.0] < pr[150.0]


def test_participation_ratio_extremes():
    assert participation_ratio(np.ones((10, 3))) == pytest.approx(1.0)
    f = np.zeros((10, 3))
    f[3] = 1.0
    assert participation_ratio(f) == pytest.approx(0.1)


# --------------------------------------------------------------- sampling


@pytest.fixture(scope="module")
def model(small_plane):
    return build_low_rank(SE30, small_plane, rank=24)


def test_sample_zero_is_reference(model):
    s = sample_shape(model, np.zeros(model.rank))
    assert np.array_equal(s.vertices, model.reference.vertices)
    assert np.array_equal(s.faces, model.reference.faces)


def test_sample_unit_coefficient(model):
    for i in (0, 7, 23):
        e = np.zeros(model.rank)
        e[i] = 1.0
        d = sample_shape(model, e).vertices - model.reference.vertices
        assert np.allclose(d.ravel(), model.basis[:, i], atol=1e-12)


def test_sample_seed_determinism(model):
    a = sample_shape(model, seed=5).vertices
    assert np.array_equal(a, sample_shape(model, seed=5).vertices)
    assert not np.array_equal(a, sample_shape(model, seed=6).vertices)
    with pytest.raises(ModelError):
        sample_shape(model, np.zeros(3))


def test_monte_carlo_covariance(model):
    rng = np.random.default_rng(0)
    alphas = rng.standard_normal((10 ** 4, model.rank))
    disp = alphas @ model.basis.T
    emp = disp.T @ disp / len(disp)
    cov = model.covariance()
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05


def test_save_load_round_trip(tmp_path, model):
    p = tmp_path / "m.npz"
    model.save(p)
    back = LowRankGP.load(p)
    assert np.array_equal(back.basis, model.basis)
    assert np.array_equal(back.eigenvalues, model.eigenvalues)
    assert back.spec == model.spec
    assert back.reference.content_hash() == model.reference.content_hash()
    assert np.array_equal(back.subset, model.subset)


def test_load_rejects_bad_version(tmp_path, model):
    p = tmp_path / "m.npz"
    model.save(p)
    with np.load(p) as z:
        data = dict(z)
    data["format_version"] = np.array(99)
    np.savez(p, **data)
    with pytest.raises(ModelError, match="version"):
        LowRankGP.load(p)
    data["format_version"] = np.array(1)
    data["mesh_hash"] = np.array("x" * 64)
    np.savez(p, **data)
    with pytest.raises(ModelError, match="hash"):
        LowRankGP.load(p)


# -------------------------------------------------------------- posterior


def test_posterior_zero_observations(model):
    post = condition_on_landmarks(model, SE30, [3, 50], np.zeros((2, 3)))
    assert np.allclose(post.mean_at(), 0.0)


def test_single_landmark_shrinkage(model):
    s2 = 0.5
    post = condition_on_landmarks(model, SE30, [42], [[1.0, 0.0, 0.0]], noise_variance=s2)
    k = 2.0
    assert np.allclose(post.mean_at([42])[0], [k / (k + s2), 0, 0], atol=1e-14)
    assert post.variance_at([42])[0] == pytest.approx(k - k * k / (k + s2), rel=1e-12)


def test_posterior_variance_reduction(model):
    idx = [5, 77, 150]
    post = condition_on_landmarks(model, SE30, idx, np.ones((3, 3)))
    far = np.arange(200)
    var = post.variance_at(far)
    assert np.all(var <= 2.0 + 1e-12)
    assert np.all(var[idx] < 1e-3 * 2.0)
    assert post.kernel(5, 5) == pytest.approx(var[5])
    kij = kernel_block(SE30, model.reference, [5], [9])[0, 0]
    assert abs(post.kernel(5, 9)) < kij


def test_posterior_error_scales_linearly_with_noise(model):
    rng = np.random.default_rng(2)
    idx = np.array([12, 60, 111, 170, 195])
    y = rng.normal(size=(5, 3))
    s2s = np.logspace(-8, -3, 6) * 2.0
    errs = []
    for s2 in s2s:
        post = condition_on_landmarks(model, SE30, idx, y, noise_variance=s2)
        errs.append(np.abs(post.mean_at(idx) - y).max())
    slope = np.polyfit(np.log(s2s), np.log(errs), 1)[0]
    assert abs(slope - 1.0) < 0.1
    assert errs[0] < 1e-6


def test_posterior_default_noise_and_errors(model):
    post = condition_on_landmarks(model, SE30, [1], [[0, 0, 1.0]])
    assert post.noise_variance == pytest.approx(2e-4)
    with pytest.raises(ModelError):
        condition_on_landmarks(model, SE30, [], np.zeros((0, 3)))
    with pytest.raises(ModelError):
        condition_on_landmarks(model, SE30, [1, 2], [[0, 0, 1.0]])
    with pytest.raises(ModelError):
        condition_on_landmarks(model, SE30, [1], [[0, 0, 1.0]], noise_variance=0.0)


def test_posterior_low_rank(model):
    idx = [20, 120]
    y = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, 0.0]])
    post = condition_on_landmarks(model, SE30, idx, y, noise_variance=1e-3)
    lr = post.to_low_rank()
    assert lr.rank == model.rank
    assert np.allclose(lr.displacement(np.zeros(lr.rank)), post.mean_at(), atol=1e-12)
    # landmark rows of the posterior basis are nearly pinned
    rows = (3 * np.array(idx)[:, None] + np.arange(3)).ravel()
    assert np.linalg.norm(lr.basis[rows]) < 0.1 * np.linalg.norm(model.basis[rows])
    assert np.all(np.diff(lr.eigenvalues) <= 1e-12)
