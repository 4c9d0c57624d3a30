import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendertrack.geometry import (
    Camera,
    DeformableMesh,
    FeatureTexture,
    Pose,
    deformed_vertices,
    face_normals,
    make_prototype_sphere,
    normalize_quaternion,
    project,
    quat_angle_deg,
    quat_from_axis_angle,
    quat_matrix_jacobian,
    quat_multiply,
    quat_to_matrix,
    read_obj,
    tangent_gradient,
    uniform_laplacian,
    unproject,
    write_obj,
)


def test_default_sphere_counts(sphere):
    assert sphere.n_vertices == 1212
    assert sphere.n_faces == 2420


def test_small_sphere_counts():
    m = make_prototype_sphere(3, 3)
    assert (m.n_vertices, m.n_faces) == (8, 12)


def test_sphere_unit_diameter_and_outward(sphere):
    v = deformed_vertices(sphere)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 0.5, atol=1e-12)
    centers = v[sphere.faces].mean(axis=1)
    n = face_normals(v, sphere.faces)
    assert np.all((n * centers).sum(axis=1) > 0)


def test_sphere_closed_manifold(sphere):
    # every undirected edge is shared by exactly two faces
    f = sphere.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)
    # Euler characteristic of a sphere
    assert sphere.n_vertices - len(counts) + sphere.n_faces == 2


def test_sphere_uv_in_unit_square(sphere):
    assert sphere.face_uv.min() >= 0.0 and sphere.face_uv.max() <= 1.0


def test_offsets_shape_checked(sphere):
    with pytest.raises(ValueError):
        sphere.with_offsets(np.zeros((3, 3)))


def test_mesh_arrays_read_only(sphere):
    with pytest.raises(ValueError):
        sphere.offsets[0, 0] = 1.0


def test_uniform_laplacian_brute_force():
    m = make_prototype_sphere(6, 5)
    rng = np.random.default_rng(0)
    v = deformed_vertices(m) + rng.normal(0, 0.05, (m.n_vertices, 3))
    neighbours = [set() for _ in range(m.n_vertices)]
    for a, b, c in m.faces:
        for x, y in ((a, b), (b, c), (c, a)):
            neighbours[x].add(y)
            neighbours[y].add(x)
    expected = np.array([v[i] - v[sorted(nb)].mean(axis=0) for i, nb in enumerate(neighbours)])
    np.testing.assert_allclose(uniform_laplacian(m, v), expected, atol=1e-14)


def test_identity_quaternion_is_identity():
    np.testing.assert_array_equal(quat_to_matrix([1, 0, 0, 0]), np.eye(3))


def test_quaternion_z90():
    q = quat_from_axis_angle([0, 0, 1], 90.0)
    np.testing.assert_allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        normalize_quaternion([0, 0, 0, 0])


def test_quaternion_double_cover_angle():
    q = quat_from_axis_angle([1, 2, 3], 40.0)
    assert quat_angle_deg(q, -q) == pytest.approx(0.0, abs=1e-6)
    assert quat_angle_deg(q, quat_from_axis_angle([1, 2, 3], 70.0)) == pytest.approx(30.0, abs=1e-9)


def test_quat_matrix_jacobian_fd(rng):
    q = normalize_quaternion(rng.normal(size=4))
    jac = quat_matrix_jacobian(q)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        # the matrix formula is polynomial in the unit quaternion's components
        fd = (_raw_matrix(q + e) - _raw_matrix(q - e)) / (2 * h)
        np.testing.assert_allclose(jac[k], fd, atol=1e-8)


def _raw_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def test_tangent_gradient_is_orthogonal(rng):
    q = rng.normal(size=4)
    g = tangent_gradient(q, rng.normal(size=4))
    assert abs(g @ q) < 1e-12


def test_quat_multiply_composes_rotations():
    a = quat_from_axis_angle([0, 1, 0], 25.0)
    b = quat_from_axis_angle([1, 0, 0], 50.0)
    np.testing.assert_allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-14)


def test_focal_length():
    cam = Camera(64, 64)
    assert cam.focal == pytest.approx(32.0 / math.tan(math.radians(22.5)), rel=1e-15)
    assert cam.center == (32.0, 32.0)


def test_projection_of_optical_axis():
    cam = Camera(64, 48)
    np.testing.assert_allclose(project(cam, [[0.0, 0.0, -2.0]])[0, :2], [32.0, 24.0])


def test_projection_y_up():
    cam = Camera(64, 64)
    uv = project(cam, [[0.0, 0.1, -1.0]])[0]
    assert uv[1] < 32.0


def test_projection_behind_camera_rejected():
    with pytest.raises(ValueError):
        project(Camera(8, 8), [[0.0, 0.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 63), st.floats(0, 47), st.floats(0.1, 50))
def test_unproject_round_trip(u, v, d):
    cam = Camera(64, 48)
    p = unproject(cam, u, v, d)
    np.testing.assert_allclose(project(cam, [p])[0], [u, v, d], rtol=1e-9, atol=1e-9)


def test_pose_transform():
    p = Pose([1.0, 2.0, 3.0], quat_from_axis_angle([0, 0, 1], 90.0))
    np.testing.assert_allclose(p.transform(np.array([[1.0, 0.0, 0.0]])), [[1.0, 3.0, 3.0]], atol=1e-15)


def test_texture_zeros():
    t = FeatureTexture.zeros(3)
    assert t.data.shape == (300, 300, 3) and not t.data.any()


def test_obj_round_trip(tmp_path, rng):
    m = make_prototype_sphere(8, 6)
    m = m.with_offsets(rng.normal(0, 0.01, m.prototype_vertices.shape))
    path = tmp_path / "m.obj"
    write_obj(path, m)
    back = read_obj(path)
    assert back.n_vertices == m.n_vertices
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(deformed_vertices(back), deformed_vertices(m))
    np.testing.assert_array_equal(back.face_uv, m.face_uv)


def test_mesh_requires_every_vertex_used():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    f = np.array([[0, 1, 2]])
    with pytest.raises(ValueError):
        DeformableMesh(v, np.zeros_like(v), f, np.zeros((4, 2)), np.zeros((1, 3, 2)))
