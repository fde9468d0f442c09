import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gorender.errors import InvalidInput
from gorender.geometry import (Camera, ObjectFrame, PointCloud, RigidTransform, TriangleMesh, box_mesh, load_cameras,
                               load_obj, load_ply, normalize_object, orbit_trajectory, project, project_points,
                               save_cameras, save_obj, save_ply, unproject, uv_sphere_mesh)

from conftest import random_transform


def test_rigid_inverse_and_associativity(rng):
    a, b, c = (random_transform(rng) for _ in range(3))
    ident = a.inverse().compose(a)
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-6)
    assert np.allclose(ident.translation, 0, atol=1e-6)
    lhs = a.compose(b).compose(c).matrix()
    rhs = a.compose(b.compose(c)).matrix()
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_rigid_rejects_reflection():
    with pytest.raises(InvalidInput):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_camera_validation():
    with pytest.raises(InvalidInput):
        Camera(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(InvalidInput):
        Camera(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(InvalidInput):
        Camera(1.0, 1.0, 1.0, 1.0, 4, 4, near=0.0)


def test_normalize_unit_cube():
    frame = normalize_object(PointCloud([[0, 0, 0], [1, 1, 1], [1, 0, 0]]))
    assert np.allclose(frame.center, 0.5)
    assert frame.half_extent == 0.5


def test_normalize_max_axis():
    frame = normalize_object(box_mesh((2.0, 1.0, 1.0)))
    assert np.allclose(frame.center, 0.0)
    assert frame.half_extent == 1.0


def test_normalize_single_point_clamps():
    frame = normalize_object(PointCloud([[2.0, 3.0, 4.0]]))
    assert np.allclose(frame.center, [2, 3, 4])
    assert frame.half_extent == 1e-6


def test_normalize_empty():
    with pytest.raises(InvalidInput):
        PointCloud(np.zeros((0, 3)))


def test_normalize_idempotent():
    mesh = box_mesh((2.0, 2.0, 2.0))
    frame = normalize_object(mesh)
    assert np.allclose(frame.center, 0, atol=1e-9) and abs(frame.half_extent - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-100, 100)] * 3), min_size=1, max_size=30))
def test_normalized_points_in_cube(points):
    frame = normalize_object(PointCloud(points))
    p = frame.normalize(np.asarray(points))
    assert np.all(np.abs(p) <= 1 + 1e-9)


def test_project_examples(simple_camera):
    assert project(simple_camera, (0, 0, 2)) == (50.0, 50.0, 2.0)
    assert project(simple_camera, (0, 0, -1)) is None
    assert project(simple_camera, (1, 0, 2)) == (100.0, 50.0, 2.0)


def test_project_unproject_round_trip(rng):
    for _ in range(20):
        cam = Camera(80.0, 90.0, 32.0, 30.0, 64, 64, random_transform(rng))
        p_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
        p = cam.extrinsics.inverse().apply(p_cam)
        u, v, z = project(cam, p)
        back = unproject(cam, u, v, z)
        assert np.linalg.norm(back - p) <= 1e-6 * max(1.0, np.linalg.norm(p))


def test_orbit_even_azimuths():
    frame = ObjectFrame(np.array([0.3, -0.2, 1.0]), 0.5)
    cams = orbit_trajectory(frame, 2.0, 0.0, 4)
    azimuths = []
    for cam in cams:
        rel = cam.center - frame.center
        azimuths.append(math.atan2(rel[0], rel[2]) % (2 * math.pi))
        forward = cam.extrinsics.rotation[2]
        # optical axis passes through the center
        to_center = frame.center - cam.center
        assert np.linalg.norm(np.cross(forward, to_center / np.linalg.norm(to_center))) < 1e-6
        assert abs(rel[1]) < 1e-9
    assert np.allclose(azimuths, [0, math.pi / 2, math.pi, 3 * math.pi / 2], atol=1e-9)


def test_orbit_single_and_invalid():
    frame = ObjectFrame(np.zeros(3), 1.0)
    (cam,) = orbit_trajectory(frame, 3.0, 0.2, 1)
    rel = cam.center
    assert abs(math.atan2(rel[0], rel[2])) < 1e-12
    with pytest.raises(InvalidInput):
        orbit_trajectory(frame, 0.5, 0.0, 4)


def test_orbit_keeps_aabb_in_frustum(rng):
    for _ in range(10):
        frame = ObjectFrame(rng.normal(size=3), rng.uniform(0.1, 3))
        radius = frame.half_extent * rng.uniform(3.0, 6.0)
        corners = frame.center + frame.half_extent * np.array(
            [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)])
        for cam in orbit_trajectory(frame, radius, rng.uniform(-1.2, 1.2), 7):
            uv, _, front = project_points(cam, corners)
            assert front.all()
            assert np.all((uv >= 0) & (uv <= [cam.width, cam.height]))


def test_camera_json_round_trip(tmp_path, rng):
    cams = [Camera(50.0, 60.0, 16.0, 15.0, 32, 30, random_transform(rng), near=0.01)]
    save_cameras(tmp_path / "cams.json", cams)
    back = load_cameras(tmp_path / "cams.json")
    assert back[0].to_dict() == cams[0].to_dict()


def test_obj_round_trip_and_fan(tmp_path):
    mesh = uv_sphere_mesh(1.0, 6, 8)
    save_obj(tmp_path / "s.obj", mesh)
    back = load_obj(tmp_path / "s.obj")
    assert np.allclose(back.vertices, mesh.vertices) and np.array_equal(back.triangles, mesh.triangles)
    (tmp_path / "quad.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    quad = load_obj(tmp_path / "quad.obj")
    assert quad.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_mesh_drops_degenerate_and_checks_indices():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert mesh.triangles.tolist() == [[0, 1, 3]]
    with pytest.raises(InvalidInput):
        TriangleMesh([[0, 0, 0]], [[0, 1, 2]])


def test_ply_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)))
    save_ply(tmp_path / "c.ply", cloud)
    assert np.allclose(load_ply(tmp_path / "c.ply").points, cloud.points, atol=1e-7)
