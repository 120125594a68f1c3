import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gpmmreg.meshcore import (BVH, LandmarkError, LandmarkSet, Mesh, MeshError, Similarity, closest_point_on_triangles,
                              load_mesh, nearest_point_on_surface, read_landmarks, save_mesh,
                              save_mesh_with_scalars, scalars_to_colors, similarity_align, similarity_from_points,
                              write_landmarks)
from gpmmreg.expcli.synth import icosphere

from conftest import random_surface
from oracles import closest_point_brute, horn_similarity

TETRA_OBJ = """# unit tetrahedron
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ------------------------------------------------------------------ mesh


def test_load_tetrahedron(tmp_path):
    m = load_mesh(write(tmp_path, "t.obj", TETRA_OBJ))
    assert m.n_vertices == 4 and m.n_faces == 4
    assert np.allclose(np.linalg.norm(m.vertex_normals, axis=1), 1.0, atol=1e-6)
    # outward normals of a closed tetrahedron point away from the centroid
    assert np.all(np.einsum("ij,ij->i", m.vertex_normals, m.vertices - m.vertices.mean(0)) > 0)


def test_obj_quad_face_reports_index(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nf 1 2 5\nf 1 2 3 4\n"
    with pytest.raises(MeshError, match="non-triangular face at index 1"):
        load_mesh(write(tmp_path, "q.obj", text))


def test_obj_sub_indices_and_negative_indices(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/1/1 3//1\nf -3 -2 -1\n"
    m = load_mesh(write(tmp_path, "s.obj", text))
    assert m.faces.tolist() == [[0, 1, 2], [0, 1, 2]]


@pytest.mark.parametrize("text, msg", [
    ("", "empty"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\n", "empty"),
    ("v 0 0 x\nf 1 2 3\n", "malformed vertex"),
    ("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n", "degenerate face at index 0"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 2\n", "degenerate face at index 0"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n", "out of range"),
])
def test_obj_errors(tmp_path, text, msg):
    with pytest.raises(MeshError, match=msg):
        load_mesh(write(tmp_path, "bad.obj", text))


def test_ply_with_colors(tmp_path):
    text = (
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\n"
        "property list uchar int vertex_indices\nend_header\n"
        "0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n3 0 1 2\n"
    )
    m = load_mesh(write(tmp_path, "c.ply", text))
    assert np.array_equal(m.vertex_colors, np.eye(3))


def test_ply_garbage(tmp_path):
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path, "g.ply", "not a ply file\n"))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "nope.obj")


@pytest.mark.parametrize("suffix, text", [(".obj", False), (".ply", True), (".ply", False)])
def test_round_trip(tmp_path, suffix, text):
    m = random_surface(seed=3)
    colors = np.random.default_rng(0).integers(0, 256, (m.n_vertices, 3)) / 255.0
    m = m.with_colors(colors)
    p = tmp_path / f"m{suffix}"
    save_mesh(m, p, text=text)
    back = load_mesh(p)
    assert np.allclose(back.vertices, m.vertices, rtol=1e-6, atol=0)
    assert np.array_equal(back.faces, m.faces)
    if suffix == ".ply":
        assert np.allclose(back.vertex_colors, colors, atol=1e-12)


def test_binary_ply_layout(tmp_path):
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[1, 0, 0]] * 3)
    p = tmp_path / "b.ply"
    save_mesh(m, p)
    raw = p.read_bytes()
    head, body = raw.split(b"end_header\n")
    assert b"format binary_little_endian 1.0" in head
    assert b"property double x" in head and b"property uchar red" in head
    assert b"property list uchar int vertex_indices" in head
    # 3 vertices x (3 doubles + 3 bytes) then one face: count byte + 3 int32
    assert len(body) == 3 * 27 + 1 + 12
    assert np.frombuffer(body[27:35], "<f8")[0] == 1.0


def test_invalid_meshes():
    with pytest.raises(MeshError, match="at least 3"):
        Mesh([[0, 0, 0], [1, 0, 0]], np.zeros((0, 3)))
    with pytest.raises(MeshError, match="no faces"):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], np.zeros((0, 3)))
    with pytest.raises(MeshError, match="non-finite"):
        Mesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def test_mesh_is_immutable():
    m = random_surface()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


def test_normals_unit_and_consistent():
    s = icosphere(2)
    assert np.allclose(np.linalg.norm(s.vertex_normals, axis=1), 1.0, atol=1e-6)
    cos = np.einsum("ij,ij->i", s.vertex_normals, s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True))
    assert cos.min() > 0.99


def test_content_hash_changes_with_geometry():
    m = random_surface()
    v = m.vertices.copy()
    v[0, 0] += 1e-9
    assert m.content_hash() != m.with_vertices(v).content_hash()
    assert m.content_hash() == Mesh(m.vertices.copy(), m.faces.copy()).content_hash()


# ----------------------------------------------------------- scalars


def test_constant_scalars_single_color(tmp_path):
    m = random_surface()
    c = scalars_to_colors(np.full(m.n_vertices, 3.0))
    assert np.all(c == c[0])
    p = tmp_path / "s.ply"
    save_mesh_with_scalars(m, np.full(m.n_vertices, 3.0), p)
    back = load_mesh(p)
    assert np.all(back.vertex_colors == back.vertex_colors[0])


def test_scalar_colors_monotone_endpoints():
    s = np.linspace(-2.0, 5.0, 50)
    c = scalars_to_colors(s)
    from matplotlib import colormaps
    assert np.allclose(c[0], colormaps["viridis"](0.0)[:3])
    assert np.allclose(c[-1], colormaps["viridis"](1.0)[:3])
    # viridis gets brighter along the map
    lum = c @ [0.2126, 0.7152, 0.0722]
    assert np.all(np.diff(lum) > 0)


def test_error_colored_mesh(tmp_path):
    m = random_surface()
    err = np.linalg.norm(m.vertices, axis=1)
    p = tmp_path / "err.ply"
    save_mesh_with_scalars(m, err, p)
    back = load_mesh(p)
    lo, hi = np.argmin(err), np.argmax(err)
    assert np.allclose(back.vertex_colors[lo], scalars_to_colors([0.0, 1.0])[0], atol=1 / 255)
    assert np.allclose(back.vertex_colors[hi], scalars_to_colors([0.0, 1.0])[1], atol=1 / 255)
    with pytest.raises(MeshError):
        save_mesh_with_scalars(m, err[:-1], p)


# ------------------------------------------------------------ closest


def test_closest_point_at_vertex():
    m = random_surface(seed=2)
    for i in (0, 17, 80):
        p, f, n = nearest_point_on_surface(m, m.vertices[i])
        assert np.linalg.norm(p - m.vertices[i]) == 0.0
        assert i in m.faces[f]
        assert abs(np.linalg.norm(n) - 1) < 1e-9


def test_closest_point_orthogonal_projection():
    m = Mesh([[0, 0, 0], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    p, f, n = nearest_point_on_surface(m, [1.0, 1.0, 5.0])
    assert np.allclose(p, [1, 1, 0]) and f == 0
    assert np.allclose(n, [0, 0, 1])


def test_closest_point_regions():
    a, b, c = np.eye(3)[[0]] * 0, np.array([[2.0, 0, 0]]), np.array([[0, 2.0, 0]])
    q = np.array([[-1.0, -1.0, 0.3], [1.0, -1.0, 0.0], [3.0, 3.0, 0.0], [0.5, 0.5, -2.0]])
    pts, bary = closest_point_on_triangles(q, np.repeat(a, 4, 0), np.repeat(b, 4, 0), np.repeat(c, 4, 0))
    assert np.allclose(pts, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0.5, 0.5, 0]])
    assert np.allclose(bary.sum(1), 1.0)


def test_bvh_matches_brute_force_1000_queries():
    m = random_surface(n_side=17, seed=5)  # 512 faces
    assert m.n_faces >= 500
    rng = np.random.default_rng(9)
    lo, hi = m.vertices.min(0) - 5, m.vertices.max(0) + 5
    q = rng.uniform(lo, hi, (1000, 3))
    hit = BVH(m).query(q)
    for k in range(len(q)):
        d, p, f = closest_point_brute(q[k], m.vertices, m.faces)
        assert hit.distances[k] == pytest.approx(d, rel=1e-9, abs=1e-9)
        if hit.faces[k] != f:
            # a tie: the library's face must be equally close
            d2, _, _ = closest_point_brute(q[k], m.vertices, m.faces[[hit.faces[k]]])
            assert d2 == pytest.approx(d, rel=1e-9, abs=1e-9)
        else:
            assert np.allclose(hit.points[k], p, atol=1e-8)


def test_bvh_sphere_distances():
    s = icosphere(3, 10.0)
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    q = dirs * rng.uniform(2.0, 20.0, (200, 1))
    hit = BVH(s).query(q)
    r = np.linalg.norm(q, axis=1)
    # inscribed polyhedron: distances are within the chord sagitta of |r - 10|
    assert np.all(np.abs(hit.distances - np.abs(r - 10.0)) < 0.1)


# ------------------------------------------------------------ landmarks


def test_landmark_file_round_trip(tmp_path):
    m = random_surface()
    text = "# comment\nnose 1.0 2.0 3.5\nchin #12\n\n"
    p = write(tmp_path, "l.txt", text)
    lm = read_landmarks(p, m)
    assert lm.names == ["nose", "chin"]
    assert lm.vertex_index("chin") == 12
    assert np.allclose(lm.position("chin"), m.vertices[12])
    q = tmp_path / "l2.txt"
    write_landmarks(lm, q)
    back = read_landmarks(q, m)
    assert np.array_equal(back.positions(), lm.positions())


def test_landmark_errors(tmp_path):
    m = random_surface()
    with pytest.raises(LandmarkError, match="duplicate"):
        read_landmarks(write(tmp_path, "d.txt", "a 0 0 0\na 1 1 1\n"))
    with pytest.raises(LandmarkError, match="malformed"):
        read_landmarks(write(tmp_path, "m.txt", "a 0 0\n"))
    with pytest.raises(LandmarkError, match="outside"):
        LandmarkSet({"a": 10 ** 6}, m)
    with pytest.raises(LandmarkError, match="unique"):
        LandmarkSet.from_vertices(m, [1, 2], ["x", "x"])


# ------------------------------------------------------------ alignment


def _pts(seed=0, n=6):
    return np.random.default_rng(seed).normal(size=(n, 3)) * 20.0


def test_align_identity():
    p = _pts()
    s = similarity_from_points(p, p)
    assert np.allclose(s.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(s.translation, 0, atol=1e-10) and s.scale == pytest.approx(1.0, abs=1e-12)


def test_align_exact_rotation_scale():
    p = _pts(1)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    q = 2.0 * p @ rz.T + np.array([3.0, -4.0, 5.0])
    s = similarity_from_points(p, q)
    assert np.allclose(s.rotation, rz, atol=1e-10)
    assert s.scale == pytest.approx(2.0, abs=1e-10)
    assert np.allclose(s.translation, [3, -4, 5], atol=1e-10)
    assert np.linalg.det(s.rotation) == pytest.approx(1.0, abs=1e-12)


def test_align_noisy_matches_quaternion_oracle():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(8, 3)) * 10
    ang = 0.7
    rot = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
    dst = 1.5 * src @ rot.T + [1, 2, 3] + rng.normal(size=(8, 3)) * 0.3
    s = similarity_from_points(src, dst)
    res = np.sum((s.apply(src) - dst) ** 2)
    r, t, sc = horn_similarity(src, dst)
    assert res == pytest.approx(np.sum((sc * src @ r.T + t - dst) ** 2), rel=1e-10)
    # frozen from the quaternion oracle
    assert res == pytest.approx(0.7006170767558977, rel=1e-9)
    assert s.scale == pytest.approx(1.4949159091060382, rel=1e-9)


def test_align_reflection_is_never_returned():
    p = _pts(2)
    q = p * np.array([-1.0, 1.0, 1.0])
    s = similarity_from_points(p, q)
    assert np.linalg.det(s.rotation) == pytest.approx(1.0)


def test_align_errors():
    p = _pts(3)
    with pytest.raises(LandmarkError, match="at least 3"):
        similarity_from_points(p[:2], p[:2])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(LandmarkError, match="collinear"):
        similarity_from_points(line, line)
    # source fine but target collapsed to a point: cross-covariance rank 0
    with pytest.raises(LandmarkError, match="rank"):
        similarity_from_points(p, np.zeros_like(p))


def test_similarity_align_by_name():
    p = _pts(4, 5)
    src = LandmarkSet({f"l{k}": p[k] for k in range(5)})
    tgt = LandmarkSet({f"l{k}": p[k] + 1.0 for k in (4, 2, 0, 3)} | {"other": np.zeros(3)})
    s = similarity_align(src, tgt)
    assert np.allclose(s.translation, 1.0, atol=1e-10)
    with pytest.raises(LandmarkError, match="at least 3"):
        similarity_align(src, LandmarkSet({"l0": p[0], "l1": p[1]}))


def test_similarity_inverse():
    s = Similarity(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), np.array([1.0, 2.0, 3.0]), 1.7)
    p = _pts(5)
    assert np.allclose(s.inverse().apply(s.apply(p)), p, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.2, 5.0), perm_seed=st.integers(0, 1000))
def test_align_relabel_and_equivariance(seed, scale, perm_seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(7, 3)) * 10
    q = p @ Rotation.from_rotvec(rng.normal(size=3)).as_matrix().T + rng.normal(size=(7, 3))
    base = similarity_from_points(p, q)
    res = np.sum((base.apply(p) - q) ** 2)
    perm = np.random.default_rng(perm_seed).permutation(7)
    s2 = similarity_from_points(p[perm], q[perm])
    assert np.sum((s2.apply(p) - q) ** 2) == pytest.approx(res, rel=1e-8, abs=1e-9)
    # pre-applying the same similarity T to both sets: residual scales with T's scale squared
    t = Similarity(Rotation.from_rotvec(rng.normal(size=3)).as_matrix(), rng.normal(size=3), scale)
    s3 = similarity_from_points(t.apply(p), t.apply(q))
    res3 = np.sum((s3.apply(t.apply(p)) - t.apply(q)) ** 2)
    assert res3 == pytest.approx(scale ** 2 * res, rel=1e-8, abs=1e-9)
