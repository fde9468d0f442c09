"""Cameras, rigid transforms, proxy geometry and the object frame.

Conventions: extrinsics map world to camera, the camera looks down +Z,
pixel u grows right and v grows down, pixel centers sit at integer + 0.5.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import InvalidInput

DEFAULT_NEAR = 1e-3
MIN_HALF_EXTENT = 1e-6
DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidInput("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform)
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInput("focal lengths must be positive")
        if not self.near > 0:
            raise InvalidInput("near plane must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInput("resolution must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInput("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.extrinsics.rotation.T @ self.extrinsics.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.extrinsics.apply(points)

    def with_extrinsics(self, extrinsics: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsics, self.near)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near,
            "R": self.extrinsics.rotation.reshape(-1).tolist(),
            "t": self.extrinsics.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            ext = RigidTransform(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), np.asarray(d["t"], dtype=np.float64))
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), ext, float(d.get("near", DEFAULT_NEAR)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInput):
                raise
            raise InvalidInput(f"malformed camera record: {exc}") from exc


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidInput("triangle index out of range")
        if f.size:
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            f = f[area > DEGENERATE_AREA]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def points(self) -> np.ndarray:
        return self.vertices

    def transformed(self, transform: RigidTransform, scale: float = 1.0) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices * scale), self.triangles)

    @staticmethod
    def merge(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            raise InvalidInput("point cloud is empty")
        object.__setattr__(self, "points", p)


Proxy = Union[TriangleMesh, PointCloud]


@dataclass(frozen=True)
class ObjectFrame:
    center: np.ndarray
    half_extent: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.half_extent > 0:
            raise InvalidInput("half_extent must be positive")

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.half_extent

    def denormalize(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * self.half_extent + self.center


def normalize_object(proxy: Proxy) -> ObjectFrame:
    """Uniform AABB normalization mapping the proxy into [-1, 1]^3."""
    pts = np.asarray(proxy.points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInput("proxy is empty")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float(np.max(hi - lo)) / 2.0
    return ObjectFrame((lo + hi) / 2.0, max(half, MIN_HALF_EXTENT))


def project(camera: Camera, point) -> tuple[float, float, float] | None:
    """Pinhole projection of one point; ``None`` when at or behind the near plane."""
    x, y, z = camera.to_camera(np.asarray(point, dtype=np.float64))
    if z <= camera.near:
        return None
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, float(z)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (uv, depth, in_front mask)."""
    pc = camera.to_camera(points)
    z = pc[:, 2]
    front = z > camera.near
    zs = np.where(front, z, 1.0)
    uv = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    return uv, z, front


def unproject(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    pc = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return camera.extrinsics.inverse().apply(pc)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return RigidTransform(rot, -rot @ eye)


def pinhole(width: int, height: int, fov_deg: float, extrinsics: RigidTransform | None = None,
            near: float = DEFAULT_NEAR) -> Camera:
    """Square-pixel camera with horizontal field of view ``fov_deg``."""
    f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, width, height, extrinsics or RigidTransform(), near)


def orbit_position(frame: ObjectFrame, radius: float, azimuth: float, elevation: float) -> np.ndarray:
    offset = np.array([math.cos(elevation) * math.sin(azimuth), math.sin(elevation),
                       math.cos(elevation) * math.cos(azimuth)])
    return frame.center + radius * offset


def orbit_trajectory(frame: ObjectFrame, radius: float, elevation: float, frames: int, *,
                     width: int = 64, height: int = 64, fov_deg: float = 80.0,
                     start_azimuth: float = 0.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth over [0, 2π), all looking at the frame center."""
    if radius <= frame.half_extent:
        raise InvalidInput(f"orbit radius {radius} must exceed half_extent {frame.half_extent}")
    if frames < 1:
        raise InvalidInput("frames must be >= 1")
    cams = []
    for k in range(frames):
        az = start_azimuth + 2.0 * math.pi * k / frames
        eye = orbit_position(frame, radius, az, elevation)
        cams.append(pinhole(width, height, fov_deg, look_at(eye, frame.center)))
    return cams


# -- primitive meshes ------------------------------------------------------

def box_mesh(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    h = np.asarray(extents, dtype=np.float64) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners * h + np.asarray(center, dtype=np.float64), np.array(tris))


def uv_sphere_mesh(radius: float = 1.0, stacks: int = 12, slices: int = 24, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    verts = [(0.0, radius, 0.0)]
    for i in range(1, stacks):
        phi = math.pi * i / stacks
        for j in range(slices):
            theta = 2.0 * math.pi * j / slices
            verts.append((radius * math.sin(phi) * math.sin(theta), radius * math.cos(phi),
                          radius * math.sin(phi) * math.cos(theta)))
    verts.append((0.0, -radius, 0.0))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * slices + (j % slices)

    tris = []
    for j in range(slices):
        tris.append((0, ring(1, j), ring(1, j + 1)))
        tris.append((south, ring(stacks - 1, j + 1), ring(stacks - 1, j)))
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            tris += [(a, c, d), (a, d, b)]
    return TriangleMesh(np.asarray(verts) + np.asarray(center, dtype=np.float64), np.array(tris))


def cylinder_mesh(radius: float = 1.0, height: float = 2.0, slices: int = 24, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    h = height / 2.0
    verts = []
    for y in (h, -h):
        for j in range(slices):
            theta = 2.0 * math.pi * j / slices
            verts.append((radius * math.sin(theta), y, radius * math.cos(theta)))
    top, bottom = len(verts), len(verts) + 1
    verts += [(0.0, h, 0.0), (0.0, -h, 0.0)]
    tris = []
    for j in range(slices):
        a, b = j, (j + 1) % slices
        c, d = a + slices, b + slices
        tris += [(a, c, d), (a, d, b), (top, a, b), (bottom, d, c)]
    return TriangleMesh(np.asarray(verts) + np.asarray(center, dtype=np.float64), np.array(tris))


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.triangles
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


# -- file formats -----------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    verts, tris = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InvalidInput(f"cannot read mesh {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
        except ValueError as exc:
            raise InvalidInput(f"{path}:{lineno}: malformed OBJ record") from exc
    if not verts:
        raise InvalidInput(f"{path}: no vertices")
    return TriangleMesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> PointCloud:
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidInput(f"cannot read point cloud {path}: {exc}") from exc
    if not lines or lines[0].strip() != "ply":
        raise InvalidInput(f"{path}: missing ply header")
    count, props, body = 0, [], None
    in_vertex = False
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise InvalidInput(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if body is None or not {"x", "y", "z"} <= set(props):
        raise InvalidInput(f"{path}: PLY needs x, y, z vertex properties")
    cols = [props.index(a) for a in "xyz"]
    try:
        rows = [[float(t) for t in lines[body + k].split()] for k in range(count)]
    except (IndexError, ValueError) as exc:
        raise InvalidInput(f"{path}: truncated or malformed vertex data") from exc
    return PointCloud(np.asarray(rows)[:, cols])


def save_ply(path, cloud: PointCloud) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {len(cloud.points)}",
            "property float x", "property float y", "property float z", "end_header"]
    body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in cloud.points]
    Path(path).write_text("\n".join(head + body) + "\n")


def load_proxy(path) -> Proxy:
    suffix = Path(path).suffix.lower()
    if not Path(path).exists():
        raise FileNotFoundError(path)
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise InvalidInput(f"{path}: proxy must be .obj or .ply")


def load_cameras(path) -> list[Camera]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_dict(d) for d in data]


def save_cameras(path, cameras: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))
