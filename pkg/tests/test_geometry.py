import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnreg.errors import ContractError, DegenerateMeshError, FitError, ParseError
from gcnreg.geometry import (
    Mesh,
    PointCloud,
    knn,
    load_off,
    load_xyz,
    normalize,
    parse_off,
    rotate_z,
    sample_surface,
    save_xyz,
    tps_apply,
    tps_evaluate,
    tps_fit,
    write_off,
)

TETRA = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


def brute_knn(q, r, k):
    d = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    return np.array([sorted(range(len(r)), key=lambda j: (d[i, j], j))[:k] for i in range(len(q))])


# --- OFF --------------------------------------------------------------------


def test_parse_tetrahedron():
    mesh = parse_off(TETRA)
    assert mesh.vertices.shape == (4, 3)
    assert mesh.triangles.shape == (4, 3)


def test_coff_rejected_with_line_number():
    with pytest.raises(ParseError, match="line 1"):
        parse_off(TETRA.replace("OFF", "COFF", 1))


def test_quad_is_fan_triangulated():
    mesh = parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_counts_on_header_line_and_comments():
    mesh = parse_off("OFF 3 1 0\n# a comment\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    assert len(mesh.triangles) == 1


@pytest.mark.parametrize(
    "text, line",
    [
        ("OFF\n3 1 0\n0 0 0\n1 0\n0 1 0\n3 0 1 2\n", 4),
        ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
        ("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 7),
        ("OFF\nx y z\n", 2),
        ("", 1),
    ],
)
def test_malformed_off_reports_line(text, line):
    with pytest.raises(ParseError) as info:
        parse_off(text)
    assert info.value.line == line


def test_off_round_trip(tmp_path):
    mesh = parse_off(TETRA)
    mesh.vertices = mesh.vertices + 0.1234567890123
    write_off(mesh, tmp_path / "t.off")
    back = load_off(tmp_path / "t.off")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_xyz_round_trip_is_exact(tmp_path):
    pts = np.random.default_rng(0).normal(size=(20, 3))
    save_xyz(PointCloud(pts), tmp_path / "c.xyz", comment="test")
    np.testing.assert_array_equal(load_xyz(tmp_path / "c.xyz").points, pts)


def test_xyz_bad_line(tmp_path):
    (tmp_path / "bad.xyz").write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError, match="line 2"):
        load_xyz(tmp_path / "bad.xyz")


# --- sampling -----------------------------------------------------------------


def test_single_triangle_barycentric():
    tri = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 1]])
    pts = sample_surface(Mesh(tri, np.array([[0, 1, 2]])), 500, seed=1).points
    basis = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    uv, *_ = np.linalg.lstsq(basis, (pts - tri[0]).T, rcond=None)
    bary = np.vstack([1 - uv.sum(0), uv])
    np.testing.assert_allclose(bary.sum(0), 1.0, atol=1e-6)
    assert (bary >= -1e-6).all()
    np.testing.assert_allclose(basis @ uv, (pts - tri[0]).T, atol=1e-9)


def two_triangles():
    # areas 1 and 3, separated in z so samples can be attributed
    verts = np.array(
        [[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 5], [6, 0, 5], [0, 1, 5]], dtype=float
    )
    return Mesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))


def test_area_weighting_binomial():
    pts = sample_surface(two_triangles(), 4000, seed=0).points
    small = int((pts[:, 2] < 2.5).sum())
    assert 950 <= small <= 1050
    assert 2850 <= 4000 - small <= 3150


def test_area_weighting_over_many_seeds():
    # pooled over 20 seeds the fraction is pinned to 1/4 within a few standard errors
    small = sum(int((sample_surface(two_triangles(), 4000, seed=s).points[:, 2] < 2.5).sum()) for s in range(20))
    sigma = np.sqrt(80000 * 0.25 * 0.75)
    assert abs(small - 20000) < 4 * sigma


def test_sampling_deterministic():
    mesh = parse_off(TETRA)
    a = sample_surface(mesh, 100, seed=5).points
    np.testing.assert_array_equal(a, sample_surface(mesh, 100, seed=5).points)
    assert not np.array_equal(a, sample_surface(mesh, 100, seed=6).points)


def test_degenerate_mesh():
    flat = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(DegenerateMeshError):
        sample_surface(flat, 10)
    with pytest.raises(DegenerateMeshError):
        sample_surface(Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int)), 10)


def test_point_cloud_validation():
    with pytest.raises(ContractError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_normalize_properties(seed, scale):
    pts = np.random.default_rng(seed).normal(size=(50, 3)) * scale + 3.0
    cloud = normalize(PointCloud(pts))
    np.testing.assert_allclose(cloud.points.mean(0), 0.0, atol=1e-6)
    r = np.linalg.norm(cloud.points, axis=1).max()
    assert 1 - 1e-6 <= r <= 1 + 1e-12
    np.testing.assert_allclose(normalize(cloud).points, cloud.points, atol=1e-6)


# --- knn ------------------------------------------------------------------------


def test_knn_hand_cases():
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert knn(np.array([[0.9, 0, 0]]), ref, 2).tolist() == [[1, 0]]
    assert knn(ref[2:], ref, 1).tolist() == [[2]]


def test_knn_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    pts = rng.random((200, 3))
    np.testing.assert_array_equal(knn(pts, pts, 10), brute_knn(pts, pts, 10))


def test_knn_matches_kdtree():
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(8)
    ref, q = rng.normal(size=(500, 3)), rng.normal(size=(80, 3))
    dist, idx = cKDTree(ref).query(q, k=7)
    got = knn(q, ref, 7)
    np.testing.assert_array_equal(got, idx)
    np.testing.assert_allclose(np.linalg.norm(q[:, None] - ref[got], axis=-1), dist, atol=1e-12)


def test_knn_ties_go_to_lower_index():
    ref = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [5, 5, 5]])
    assert knn(np.zeros((1, 3)), ref, 3).tolist() == [[0, 1, 2]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.sampled_from([3, 8]))
def test_knn_property(seed, k, dim):
    rng = np.random.default_rng(seed)
    # coarse grid coordinates force plenty of exact distance ties
    q = rng.integers(0, 4, size=(15, dim)).astype(float)
    r = rng.integers(0, 4, size=(30, dim)).astype(float)
    np.testing.assert_array_equal(knn(q, r, k, chunk=4), brute_knn(q, r, k))


def test_knn_contract():
    with pytest.raises(ContractError):
        knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)
    with pytest.raises(ContractError):
        knn(np.zeros((1, 3)), np.zeros((2, 4)), 1)


# --- rotation -------------------------------------------------------------------


def test_rotate_z_cases():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    np.testing.assert_array_equal(rotate_z(pts, 0.0), pts)
    np.testing.assert_allclose(rotate_z(np.array([[1.0, 0, 0]]), np.pi / 2), [[0, 1, 0]], atol=1e-9)
    np.testing.assert_allclose(rotate_z(rotate_z(pts, 0.7), -0.7), pts, atol=1e-6)
    cloud = rotate_z(PointCloud(pts), 0.3)
    assert isinstance(cloud, PointCloud)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10))
def test_rotate_z_preserves_distances(seed, angle):
    pts = np.random.default_rng(seed).normal(size=(10, 3))
    rot = rotate_z(pts, angle)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(rot[:, None] - rot[None], axis=-1)
    np.testing.assert_allclose(d1, d0, atol=1e-6)
    np.testing.assert_array_equal(rot[:, 2], pts[:, 2])


# --- TPS --------------------------------------------------------------------------


def test_tps_zero_displacement_is_identity():
    rng = np.random.default_rng(0)
    ctrl = rng.random((5, 3))
    warp = tps_fit(ctrl, np.zeros((5, 3)))
    pts = rng.normal(size=(40, 3))
    np.testing.assert_allclose(tps_evaluate(warp, pts), pts, atol=1e-9)
    np.testing.assert_allclose(warp.weights, 0.0, atol=1e-12)
    np.testing.assert_allclose(tps_apply(warp, PointCloud(pts)).points, pts, atol=1e-9)


def test_tps_single_control_is_translation():
    delta = np.array([[0.2, -0.1, 0.4]])
    warp = tps_fit(np.array([[0.3, 0.3, 0.3]]), delta)
    pts = np.random.default_rng(1).normal(size=(40, 3)) * 3
    np.testing.assert_allclose(tps_evaluate(warp, pts), pts + delta, atol=1e-9)
    np.testing.assert_allclose(warp.weights, 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_tps_interpolates_and_meets_side_conditions(seed, m):
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(-1, 1, size=(m, 3))
    disp = rng.normal(scale=0.2, size=(m, 3))
    warp = tps_fit(ctrl, disp)
    np.testing.assert_allclose(tps_evaluate(warp, ctrl), ctrl + disp, atol=1e-6)
    np.testing.assert_allclose(warp.weights.sum(0), 0.0, atol=1e-8)
    np.testing.assert_allclose(warp.weights.T @ ctrl, 0.0, atol=1e-8)


def test_tps_interpolation_against_direct_solve():
    # independent oracle: solve the bordered system with raw (uncentred) coordinates
    rng = np.random.default_rng(4)
    ctrl, disp = rng.random((5, 3)), rng.normal(scale=0.1, size=(5, 3))
    k = np.linalg.norm(ctrl[:, None] - ctrl[None], axis=-1)
    p = np.hstack([np.ones((5, 1)), ctrl])
    a = np.block([[k, p], [p.T, np.zeros((4, 4))]])
    sol = np.linalg.solve(a, np.vstack([disp, np.zeros((4, 3))]))
    x = rng.normal(size=(7, 3))
    want = x + np.linalg.norm(x[:, None] - ctrl[None], axis=-1) @ sol[:5] + np.hstack([np.ones((7, 1)), x]) @ sol[5:]
    np.testing.assert_allclose(tps_evaluate(tps_fit(ctrl, disp), x), want, atol=1e-9)


def test_tps_duplicate_controls():
    with pytest.raises(FitError):
        tps_fit(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(FitError):
        tps_fit(np.zeros((2, 3)), np.zeros((3, 3)))
