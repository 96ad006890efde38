import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as SciRot

from horeg.errors import DataError, DegenerateParam
from horeg.geom import (IDENTITY_ROT6, CameraIntrinsics, ColoredPointCloud, PoseSequence, RigidTransform,
                        Rotation, SimilarityTransform, SixDofParam, TriangleMesh, concatenate_meshes,
                        geodesic_angle, orth, orth_jacobian, orth_matrix, sample_surface, so3_exp, so3_log)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quats = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3).map(np.array)
rotations = quats.map(Rotation)
rot6s = st.tuples(*[finite] * 6).map(np.array).filter(
    lambda r: np.linalg.norm(r[:3]) > 1e-2 and np.linalg.norm(np.cross(r[:3], r[3:])) > 1e-2 * np.linalg.norm(r[3:])
    and np.linalg.norm(r[3:]) > 1e-2)


@given(rotations)
def test_quaternion_is_canonical_and_matches_scipy(r):
    assert r.quat[0] >= 0
    assert abs(np.linalg.norm(r.quat) - 1) < 1e-12
    w, x, y, z = r.quat
    ref = SciRot.from_quat([x, y, z, w]).as_matrix()
    np.testing.assert_allclose(r.as_matrix(), ref, atol=1e-12)


@given(rotations)
def test_matrix_round_trip(r):
    back = Rotation.from_matrix(r.as_matrix())
    assert geodesic_angle(r, back) < 1e-7


@given(rotations)
def test_matrix_is_special_orthogonal(r):
    R = r.as_matrix()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@given(vec3.filter(lambda v: np.linalg.norm(v) < np.pi - 1e-6))
def test_exp_log_inverse(v):
    np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_exp_near_identity_and_at_pi():
    v = np.array([1e-14, -2e-14, 3e-14])
    np.testing.assert_allclose(so3_log(so3_exp(v)), v, rtol=1e-6)
    half = so3_log(Rotation.from_axis_angle([0, 0, 1], np.pi))
    assert np.linalg.norm(half) == pytest.approx(np.pi)


@given(rotations, rotations)
def test_geodesic_angle_symmetric_and_bounded(a, b):
    ang = geodesic_angle(a, b)
    assert 0 <= ang <= np.pi + 1e-12
    assert ang == pytest.approx(geodesic_angle(b, a), abs=1e-9)
    ref = SciRot.from_matrix(a.as_matrix().T @ b.as_matrix()).magnitude()
    assert ang == pytest.approx(ref, abs=1e-7)


@given(rotations, vec3, rotations, vec3)
def test_rigid_compose_and_inverse(r1, t1, r2, t2):
    A, B = RigidTransform(r1, t1), RigidTransform(r2, t2)
    p = np.array([[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]])
    np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-9)
    np.testing.assert_allclose(A.inverse().apply(A.apply(p)), p, atol=1e-9)
    np.testing.assert_allclose((A @ B).as_matrix(), A.as_matrix() @ B.as_matrix(), atol=1e-9)


@given(rotations, vec3)
def test_camera_center_maps_to_origin(r, t):
    T = RigidTransform(r, t)
    np.testing.assert_allclose(T.apply(T.camera_center()[None])[0], 0, atol=1e-9)


@given(st.floats(0.1, 10), rotations, vec3)
def test_similarity_inverse(s, r, t):
    S = SimilarityTransform(s, r, t)
    p = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(S.inverse().apply(S.apply(p)), p, atol=1e-8)
    np.testing.assert_allclose(S.compose(S.inverse()).apply(p), p, atol=1e-8)


def test_similarity_rejects_bad_scale():
    with pytest.raises(DataError):
        SimilarityTransform(0.0)
    with pytest.raises(DataError):
        SimilarityTransform(float("nan"))


@given(rot6s)
def test_orth_is_rotation_and_idempotent(r6):
    R = orth_matrix(r6)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(orth_matrix(R[:2].reshape(-1)), R, atol=1e-10)
    # first row follows the first vector's direction
    np.testing.assert_allclose(R[0], r6[:3] / np.linalg.norm(r6[:3]), atol=1e-12)


@given(rot6s)
@settings(max_examples=50)
def test_orth_jacobian_matches_finite_differences(r6):
    J = orth_jacobian(r6)
    h = 1e-6
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fd = (orth_matrix(r6 + e) - orth_matrix(r6 - e)) / (2 * h)
        scale = max(1.0, 1.0 / np.linalg.norm(r6[:3]), 1.0 / np.linalg.norm(r6[3:]))
        np.testing.assert_allclose(J[:, :, k], fd, atol=1e-6 * scale**2)


def test_orth_identity_and_degenerate():
    np.testing.assert_array_equal(orth_matrix(IDENTITY_ROT6), np.eye(3))
    assert orth(SixDofParam.identity()).quat.tolist() == [1, 0, 0, 0]
    with pytest.raises(DegenerateParam):
        orth_matrix([1, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateParam):
        orth_matrix([0, 0, 0, 0, 1, 0])


def test_six_dof_from_rotation():
    r = so3_exp([0.1, 0.2, -0.3])
    assert geodesic_angle(orth(SixDofParam.from_rotation(r)), r) < 1e-12


def test_intrinsics_project_and_rays():
    K = CameraIntrinsics(100, 110, 15.5, 9.5, 32, 20)
    rays = K.pixel_rays()
    uv = K.project(rays.reshape(-1, 3) * 2.5)
    xs, ys = np.meshgrid(np.arange(32), np.arange(20))
    np.testing.assert_allclose(uv, np.c_[xs.ravel(), ys.ravel()], atol=1e-12)
    with pytest.raises(DataError):
        CameraIntrinsics(100, 100, 40, 10, 32, 20)


def _tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, f)


def test_mesh_normals_point_outward():
    m = _tetra()
    centroid = m.vertices.mean(axis=0)
    fc = m.triangles().mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.face_normals(), fc - centroid) > 0)
    assert np.all(np.einsum("ij,ij->i", m.normals(), m.vertices - centroid) > 0)
    assert m.face_areas().sum() == pytest.approx(1.5 + np.sqrt(3) / 2)


def test_mesh_validation():
    with pytest.raises(DataError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(DataError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_submesh_and_concatenate():
    m = _tetra()
    sub = m.submesh(np.array([True, False, False, True]))
    assert sub.n_faces == 2 and len(sub.vertices) == 4
    both = concatenate_meshes([m, m.transformed(RigidTransform(translation=np.array([3.0, 0, 0])))])
    assert both.n_faces == 8 and both.faces.max() == 7
    assert both.face_areas().sum() == pytest.approx(2 * m.face_areas().sum())


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_surface_samples_lie_on_faces(seed):
    m = _tetra()
    pts, face, bary = sample_surface(m, 200, seed, return_index=True)
    assert np.all(bary >= 0) and np.allclose(bary.sum(axis=1), 1)
    np.testing.assert_allclose(np.einsum("nk,nkd->nd", bary, m.triangles()[face]), pts, atol=1e-15)


def test_surface_sampling_is_area_uniform():
    m = _tetra()
    _, face, _ = sample_surface(m, 200000, 0, return_index=True)
    frac = np.bincount(face, minlength=4) / 200000
    np.testing.assert_allclose(frac, m.face_areas() / m.face_areas().sum(), atol=5e-3)


def test_pose_sequence_arrays():
    rng = np.random.default_rng(0)
    poses = [RigidTransform(Rotation.random(rng), rng.normal(size=3)) for _ in range(5)]
    seq = PoseSequence(poses, valid=[1, 1, 0, 1, 1])
    assert seq.valid.dtype == bool and not seq.valid[2]
    again = PoseSequence.from_arrays(seq.rotation_matrices(), seq.translations())
    np.testing.assert_allclose(again.camera_centers(), seq.camera_centers(), atol=1e-12)
    with pytest.raises(DataError):
        PoseSequence(poses, valid=[True])


def test_point_cloud_transform():
    pc = ColoredPointCloud(np.eye(3), np.eye(3), np.full((3, 3), 0.5))
    T = RigidTransform(so3_exp([0, 0, np.pi / 2]), np.array([1.0, 0, 0]))
    moved = pc.transformed(T)
    np.testing.assert_allclose(moved.positions, T.apply(pc.positions))
    np.testing.assert_allclose(moved.normals, T.rotation.apply(pc.normals))
    assert len(pc.subset([0, 2])) == 2
