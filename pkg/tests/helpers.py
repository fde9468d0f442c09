"""Shared builders for rasterizer and acceptance tests."""
import numpy as np

from gorender.coordmap import bilinear, decode_coord
from gorender.geometry import (RigidTransform, TriangleMesh, box_mesh, cylinder_mesh, face_normals, look_at, pinhole,
                               project_points, uv_sphere_mesh)

from conftest import random_rotation


def random_closed_mesh(rng):
    kind = rng.integers(3)
    if kind == 0:
        mesh = box_mesh(rng.uniform(0.5, 2.0, 3))
    elif kind == 1:
        mesh = uv_sphere_mesh(rng.uniform(0.5, 1.5), int(rng.integers(6, 14)), int(rng.integers(8, 24)))
    else:
        mesh = cylinder_mesh(rng.uniform(0.4, 1.2), rng.uniform(0.5, 2.5), int(rng.integers(6, 24)))
    return mesh.transformed(RigidTransform(random_rotation(rng), rng.normal(size=3)))


def random_view(rng, frame, res=64, dist=(2.5, 4.5)):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    eye = frame.center + direction * frame.half_extent * rng.uniform(*dist)
    up = rng.normal(size=3)
    return pinhole(res, res, rng.uniform(60, 80), look_at(eye, frame.center, up))


def random_ellipsoid(rng, stacks=16, slices=32):
    base = uv_sphere_mesh(1.0, stacks, slices)
    mesh = TriangleMesh(base.vertices * rng.uniform(0.6, 1.4, 3), base.triangles)
    return mesh.transformed(RigidTransform(random_rotation(rng), rng.normal(size=3)))


def camera_pair(rng, frame, res, max_angle_deg=70.0):
    """Two look-at cameras whose viewing directions differ by at most ``max_angle_deg``."""
    d1 = rng.normal(size=3)
    d1 /= np.linalg.norm(d1)
    while True:
        d2 = rng.normal(size=3)
        d2 /= np.linalg.norm(d2)
        if np.degrees(np.arccos(np.clip(d1 @ d2, -1, 1))) <= max_angle_deg:
            break
    cams = []
    for d in (d1, d2):
        eye = frame.center + d * frame.half_extent * rng.uniform(2.2, 3.0)
        cams.append(pinhole(res, res, rng.uniform(60, 75), look_at(eye, frame.center, rng.normal(size=3))))
    return cams


def interior_vertex_samples(mesh, cam, cmap, min_cos=0.5, depth_tol=0.05):
    """Bilinear decoded coordinates at vertices seen unoccluded and away from the silhouette.

    A vertex qualifies when every incident face faces the camera with
    |cos| >= ``min_cos`` (no crease onto a grazing face) and the 4x4 pixel
    neighbourhood around its projection is foreground at the vertex depth.
    """
    fn = face_normals(mesh)
    uv, depth, front = project_points(cam, mesh.vertices)
    dec = decode_coord(cmap.coords)
    view = cam.center - mesh.vertices
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    incident = [[] for _ in mesh.vertices]
    for ti, tri in enumerate(mesh.triangles):
        for v in tri:
            incident[v].append(ti)
    out = {}
    for vi in range(len(mesh.vertices)):
        if not front[vi] or not incident[vi]:
            continue
        u, v = uv[vi]
        x0, y0 = int(np.floor(u - 0.5)), int(np.floor(v - 0.5))
        if x0 < 1 or y0 < 1 or x0 + 2 >= cam.width or y0 + 2 >= cam.height:
            continue
        c = fn[incident[vi]] @ view[vi]
        if np.any(np.abs(c) < min_cos) or not (np.all(c > 0) or np.all(c < 0)):
            continue
        taps = (slice(y0 - 1, y0 + 3), slice(x0 - 1, x0 + 3))
        if not cmap.validity[taps].all() or np.any(np.abs(cmap.depth[taps] - depth[vi]) > depth_tol * depth[vi]):
            continue
        out[vi] = bilinear(dec, u, v)
    return out


def visible_vertex_agreement(mesh, cam_a, cam_b, map_a, map_b):
    """Max-abs disagreement of decoded coordinates per vertex seen in both views."""
    a = interior_vertex_samples(mesh, cam_a, map_a)
    b = interior_vertex_samples(mesh, cam_b, map_b)
    return np.asarray([np.abs(a[k] - b[k]).max() for k in a if k in b])
