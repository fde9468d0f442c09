"""Object-coordinate maps rendered from a proxy.

Foreground pixels carry the visible surface point's object-frame position
mapped from [-1, 1]^3 to [0, 1]^3; background is zero with validity 0 and
infinite depth.
"""
from __future__ import annotations

import math

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import InvalidInput
from .geometry import Camera, ObjectFrame, PointCloud, TriangleMesh, project_points

DEFAULT_SPLAT_RADIUS = 1.5
_CLAMP_SLACK = 1e-6


@dataclass
class CoordinateMap:
    coords: np.ndarray    # H x W x 3, float32 in [0, 1]
    validity: np.ndarray  # H x W, uint8
    depth: np.ndarray     # H x W, float32, +inf on background

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.validity.astype(bool)

    @classmethod
    def empty(cls, width: int, height: int) -> "CoordinateMap":
        return cls(np.zeros((height, width, 3), np.float32), np.zeros((height, width), np.uint8),
                   np.full((height, width), np.inf, np.float32))

    def decoded(self) -> np.ndarray:
        """Object-frame coordinates in [-1, 1]^3 (zeros-decoded background is meaningless)."""
        return decode_coord(self.coords)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.coords, self.validity[..., None].astype(np.float32),
                               self.depth[..., None]], axis=-1).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "CoordinateMap":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 5:
            raise InvalidInput(f"coordinate map array must be H x W x 5, got {arr.shape}")
        return cls(arr[..., :3].copy(), (arr[..., 3] > 0.5).astype(np.uint8), arr[..., 4].copy())

    def save(self, path) -> None:
        tensorio.save(path, self.to_array())

    @classmethod
    def load(cls, path) -> "CoordinateMap":
        return cls.from_array(tensorio.load(path))

    def save_preview(self, path) -> None:
        """8-bit RGBA PNG for eyeballing; lossy."""
        from PIL import Image

        rgba = np.concatenate([self.coords, self.validity[..., None].astype(np.float32)], axis=-1)
        Image.fromarray(np.round(np.clip(rgba, 0, 1) * 255).astype(np.uint8), "RGBA").save(Path(path))


def encode_coord(p_norm) -> np.ndarray:
    p = np.clip(np.asarray(p_norm, dtype=np.float64), -1.0, 1.0)
    return (p + 1.0) / 2.0


def decode_coord(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) * 2.0 - 1.0


# -- triangle rasterization -------------------------------------------------

@dataclass
class Fragments:
    """Per-pixel winner of the z-test."""
    tri_id: np.ndarray   # H x W int64, -1 on background
    depth: np.ndarray    # H x W float64, +inf on background
    attrs: np.ndarray    # H x W x K float64, perspective-correct


def _clip_near(pc: np.ndarray, attrs: np.ndarray, near: float):
    """Sutherland-Hodgman against z > near for a single triangle; yields sub-triangles."""
    poly_p, poly_a = [], []
    for i in range(3):
        j = (i + 1) % 3
        pi_, pj = pc[i], pc[j]
        in_i, in_j = pi_[2] > near, pj[2] > near
        if in_i:
            poly_p.append(pi_)
            poly_a.append(attrs[i])
        if in_i != in_j:
            s = (near - pi_[2]) / (pj[2] - pi_[2])
            p = pi_ + s * (pj - pi_)
            p[2] = near * (1.0 + 1e-12)
            poly_p.append(p)
            poly_a.append(attrs[i] + s * (attrs[j] - attrs[i]))
    for k in range(1, len(poly_p) - 1):
        yield np.array([poly_p[0], poly_p[k], poly_p[k + 1]]), np.array([poly_a[0], poly_a[k], poly_a[k + 1]])


def rasterize(camera: Camera, vertices: np.ndarray, triangles: np.ndarray, attrs: np.ndarray) -> Fragments:
    """Z-buffered, perspective-correct rasterization of per-vertex attributes.

    A pixel is covered when its center lies inside the projected triangle,
    edges inclusive. Strict depth comparison in triangle order means the
    lower triangle index wins exact ties.
    """
    w, h = camera.width, camera.height
    tri_id = np.full((h, w), -1, np.int64)
    zbuf = np.full((h, w), np.inf)
    abuf = np.zeros((h, w, attrs.shape[1]))
    pc_all = camera.to_camera(vertices)
    near = camera.near
    zs = pc_all[:, 2]
    front = zs > near
    with np.errstate(divide="ignore", invalid="ignore"):
        u_all = camera.fx * pc_all[:, 0] / zs + camera.cx
        v_all = camera.fy * pc_all[:, 1] / zs + camera.cy
    for idx, tri in enumerate(np.asarray(triangles)):
        n_front = int(front[tri].sum())
        if n_front == 0:
            continue
        if n_front == 3:
            _raster_triangle(camera, idx, u_all[tri], v_all[tri], zs[tri], attrs[tri], tri_id, zbuf, abuf)
            continue
        for p3, a3 in _clip_near(pc_all[tri], attrs[tri], near):
            z = p3[:, 2]
            u = camera.fx * p3[:, 0] / z + camera.cx
            v = camera.fy * p3[:, 1] / z + camera.cy
            _raster_triangle(camera, idx, u, v, z, a3, tri_id, zbuf, abuf)
    return Fragments(tri_id, zbuf, abuf)


def _raster_triangle(camera, idx, u, v, z, a3, tri_id, zbuf, abuf):
    u0, u1, u2 = float(u[0]), float(u[1]), float(u[2])
    v0, v1, v2 = float(v[0]), float(v[1]), float(v[2])
    area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
    if abs(area) < 1e-12:
        return
    x0 = max(math.ceil(min(u0, u1, u2) - 0.5), 0)
    x1 = min(math.floor(max(u0, u1, u2) - 0.5), camera.width - 1)
    y0 = max(math.ceil(min(v0, v1, v2) - 0.5), 0)
    y1 = min(math.floor(max(v0, v1, v2) - 0.5), camera.height - 1)
    if x0 > x1 or y0 > y1:
        return
    px = np.arange(x0, x1 + 1) + 0.5
    py = np.arange(y0, y1 + 1)[:, None] + 0.5
    l0 = ((u1 - px) * (v2 - py) - (v1 - py) * (u2 - px)) / area
    l1 = ((u2 - px) * (v0 - py) - (v2 - py) * (u0 - px)) / area
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return
    w0, w1, w2 = l0 / z[0], l1 / z[1], l2 / z[2]
    depth = 1.0 / (w0 + w1 + w2)
    region = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    win = inside & (depth < zbuf[region])
    if not win.any():
        return
    d = depth[win]
    zbuf[region][win] = d
    tri_id[region][win] = idx
    abuf[region][win] = (w0[win, None] * a3[0] + w1[win, None] * a3[1] + w2[win, None] * a3[2]) * d[:, None]


def _to_coordmap(frags: Fragments, frame: ObjectFrame) -> CoordinateMap:
    h, w = frags.tri_id.shape
    cmap = CoordinateMap.empty(w, h)
    valid = frags.tri_id >= 0
    cmap.coords[valid] = encode_coord(frags.attrs[valid]).astype(np.float32)
    cmap.validity[valid] = 1
    cmap.depth[valid] = frags.depth[valid].astype(np.float32)
    return cmap


def rasterize_mesh(mesh: TriangleMesh, frame: ObjectFrame, camera: Camera) -> CoordinateMap:
    frags = rasterize(camera, mesh.vertices, mesh.triangles, frame.normalize(mesh.vertices))
    return _to_coordmap(frags, frame)


# -- point splatting ----------------------------------------------------------

def splat_points(cloud: PointCloud, frame: ObjectFrame, camera: Camera,
                 radius_px: float = DEFAULT_SPLAT_RADIUS) -> CoordinateMap:
    """Each point covers the pixel centers within ``radius_px`` of its projection."""
    if radius_px < 0.5:
        raise InvalidInput("splat radius must be >= 0.5 px")
    w, h = camera.width, camera.height
    cmap = CoordinateMap.empty(w, h)
    uv, depth, front = project_points(camera, cloud.points)
    ids = np.nonzero(front)[0]
    if len(ids) == 0:
        return cmap
    uv, depth = uv[ids], depth[ids]
    r = int(np.ceil(radius_px)) + 1
    base_x = np.floor(uv[:, 0]).astype(np.int64)
    base_y = np.floor(uv[:, 1]).astype(np.int64)
    pix, dep, pid = [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            x = base_x + dx
            y = base_y + dy
            d2 = (x + 0.5 - uv[:, 0]) ** 2 + (y + 0.5 - uv[:, 1]) ** 2
            ok = (d2 <= radius_px ** 2) & (x >= 0) & (x < w) & (y >= 0) & (y < h)
            pix.append((y * w + x)[ok])
            dep.append(depth[ok])
            pid.append(ids[ok])
    pix, dep, pid = np.concatenate(pix), np.concatenate(dep), np.concatenate(pid)
    if len(pix) == 0:
        return cmap
    order = np.lexsort((pid, dep, pix))
    pix, dep, pid = pix[order], dep[order], pid[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dep, pid = pix[first], dep[first], pid[first]
    ys, xs = np.divmod(pix, w)
    cmap.coords[ys, xs] = encode_coord(frame.normalize(cloud.points[pid])).astype(np.float32)
    cmap.validity[ys, xs] = 1
    cmap.depth[ys, xs] = dep.astype(np.float32)
    return cmap


# -- ray-casting oracle ---------------------------------------------------------

def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and per-pixel directions scaled to unit camera-z."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    d_cam = np.stack([(xs + 0.5 - camera.cx) / camera.fx, (ys + 0.5 - camera.cy) / camera.fy,
                      np.ones(xs.shape)], axis=-1).reshape(-1, 3)
    return camera.center, d_cam @ camera.extrinsics.rotation


def raycast(mesh: TriangleMesh, camera: Camera, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Nearest Möller-Trumbore hit per pixel center: (tri_id, camera depth)."""
    origin, dirs = pixel_rays(camera)
    v = mesh.vertices
    f = mesh.triangles
    a = v[f[:, 0]]
    e1 = v[f[:, 1]] - a
    e2 = v[f[:, 2]] - a
    s = origin - a
    n_pix = len(dirs)
    best_t = np.full(n_pix, np.inf)
    best_id = np.full(n_pix, -1, np.int64)
    for lo in range(0, n_pix, chunk):
        d = dirs[lo:lo + chunk, None, :]
        pvec = np.cross(d, e2[None])
        det = np.einsum("ptk,tk->pt", pvec, e1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        bu = np.einsum("ptk,tk->pt", pvec, s) * inv
        qvec = np.cross(s, e1)
        bv = np.einsum("pk,tk->pt", d[:, 0, :], qvec) * inv
        t = np.einsum("tk,tk->t", e2, qvec)[None, :] * inv
        hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > camera.near)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(len(idx)), idx]
        best_t[lo:lo + chunk] = tmin
        best_id[lo:lo + chunk] = np.where(np.isfinite(tmin), idx, -1)
    shape = (camera.height, camera.width)
    return best_id.reshape(shape), best_t.reshape(shape)


def raycast_oracle(mesh: TriangleMesh, frame: ObjectFrame, camera: Camera) -> CoordinateMap:
    tri_id, depth = raycast(mesh, camera)
    origin, dirs = pixel_rays(camera)
    cmap = CoordinateMap.empty(camera.width, camera.height)
    valid = tri_id >= 0
    hits = origin + dirs.reshape(camera.height, camera.width, 3)[valid] * depth[valid][:, None]
    cmap.coords[valid] = encode_coord(frame.normalize(hits)).astype(np.float32)
    cmap.validity[valid] = 1
    cmap.depth[valid] = depth[valid].astype(np.float32)
    return cmap


def bilinear(image: np.ndarray, u: float, v: float) -> np.ndarray:
    """Sample at continuous pixel coordinates (pixel centers at +0.5)."""
    x, y = u - 0.5, v - 0.5
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    top = (1 - fx) * image[y0, x0] + fx * image[y0, x0 + 1]
    bot = (1 - fx) * image[y0 + 1, x0] + fx * image[y0 + 1, x0 + 1]
    return (1 - fy) * top + fy * bot
