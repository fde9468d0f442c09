"""Procedural paired multi-view data.

Each sample composes a primitive object with a per-face palette, a
directional light and a background, then renders N reference views on an
even orbit and M target frames on a smooth random trajectory. RGB frames
and coordinate maps come out of the same rasterizer pass, so their
silhouettes agree pixel for pixel.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .conditioning import ReferenceUnit
from .coordmap import CoordinateMap, _to_coordmap, rasterize
from .errors import ContainerError, DatasetCorrupt, InvalidInput
from .geometry import (Camera, ObjectFrame, RigidTransform, TriangleMesh, box_mesh, cylinder_mesh, face_normals,
                       look_at, normalize_object, orbit_position, pinhole, uv_sphere_mesh)
from .rng import make_rng

KINDS = ("cube", "uv-sphere", "cylinder", "composite")
SAMPLE_CHANNELS = 8  # rgb 3, coords 3, validity 1, depth 1
FOV_DEG = 80.0
ORBIT_RADIUS = 3.0  # in half-extents
REF_ELEVATIONS = (math.radians(30.0), math.radians(-25.0))


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    yaw: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    parts: tuple[Primitive, ...]
    palette: tuple[tuple[float, float, float], ...]
    light: tuple[float, float, float]
    ambient: float
    background: tuple[tuple[float, float, float], tuple[float, float, float]]  # top, bottom
    seed: int = 0

    def __post_init__(self):
        if abs(float(np.dot(self.light, self.light)) - 1.0) > 1e-9:
            raise InvalidInput("light direction must be a unit vector")
        if not 0.0 <= self.ambient <= 1.0:
            raise InvalidInput("ambient must lie in [0, 1]")
        if np.any(np.asarray(self.palette) < 0) or np.any(np.asarray(self.palette) > 1):
            raise InvalidInput("albedo must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        parts = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), p["yaw"]) for p in d["parts"])
        return cls(d["kind"], parts, tuple(tuple(c) for c in d["palette"]), tuple(d["light"]), d["ambient"],
                   tuple(tuple(c) for c in d["background"]), d.get("seed", 0))


def generate_scene(seed: int) -> SceneSpec:
    rng = make_rng(seed, 0x5CE4E)
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "composite":
        n = int(rng.integers(2, 4))
        parts = tuple(_random_primitive(rng, KINDS[int(rng.integers(3))], offset=True) for _ in range(n))
    else:
        parts = (_random_primitive(rng, kind, offset=False),)
    palette = tuple(tuple(float(x) for x in rng.uniform(0.1, 0.95, 3)) for _ in range(int(rng.integers(2, 5))))
    light = rng.normal(size=3)
    light[1] = abs(light[1]) + 0.5
    light = tuple(float(x) for x in light / np.linalg.norm(light))
    ambient = float(rng.uniform(0.25, 0.5))
    top = tuple(float(x) for x in rng.uniform(0.0, 1.0, 3))
    bottom = top if rng.random() < 0.5 else tuple(float(x) for x in rng.uniform(0.0, 1.0, 3))
    return SceneSpec(kind, parts, palette, light, ambient, (top, bottom), int(seed))


def _random_primitive(rng, kind, offset):
    size = tuple(float(x) for x in rng.uniform(0.6, 1.4, 3))
    center = tuple(float(x) for x in rng.uniform(-0.6, 0.6, 3)) if offset else (0.0, 0.0, 0.0)
    return Primitive(kind, center, size, float(rng.uniform(0, 2 * math.pi)))


def _yaw(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def primitive_mesh(part: Primitive) -> TriangleMesh:
    if part.kind == "cube":
        base = box_mesh((2.0, 2.0, 2.0))
    elif part.kind == "uv-sphere":
        base = uv_sphere_mesh(1.0, 10, 16)
    elif part.kind == "cylinder":
        base = cylinder_mesh(1.0, 2.0, 16)
    else:
        raise InvalidInput(f"unknown primitive {part.kind}")
    verts = base.vertices * (np.asarray(part.size) / 2.0)
    return TriangleMesh(RigidTransform(_yaw(part.yaw), part.center).apply(verts), base.triangles)


def scene_mesh(scene: SceneSpec) -> TriangleMesh:
    return TriangleMesh.merge([primitive_mesh(p) for p in scene.parts])


def face_albedo(scene: SceneSpec, mesh: TriangleMesh) -> np.ndarray:
    """Palette color per triangle, grouped by face orientation so patches stay coherent."""
    n = face_normals(mesh)
    pal = np.asarray(scene.palette)
    octant = (n[:, 0] > 0).astype(int) + 2 * (n[:, 1] > 0) + 4 * (n[:, 2] > 0)
    return pal[octant % len(pal)]


def background_image(scene: SceneSpec, width: int, height: int) -> np.ndarray:
    top, bottom = np.asarray(scene.background[0]), np.asarray(scene.background[1])
    a = ((np.arange(height) + 0.5) / height)[:, None, None]
    return np.broadcast_to((1 - a) * top + a * bottom, (height, width, 3)).astype(np.float32)


def _shade_fragments(scene, mesh, camera, frags):
    normals = face_normals(mesh)
    light = np.asarray(scene.light)
    albedo = face_albedo(scene, mesh)
    img = background_image(scene, camera.width, camera.height).copy()
    valid = frags.tri_id >= 0
    ids = frags.tri_id[valid]
    n = normals[ids]
    # two-sided: flip normals facing away from the viewer
    view = camera.center - frags.attrs[valid]
    n = np.where((np.einsum("ij,ij->i", n, view) < 0)[:, None], -n, n)
    lam = scene.ambient + np.maximum(0.0, n @ light)
    img[valid] = np.clip(albedo[ids] * lam[:, None], 0.0, 1.0)
    return img


def shade(scene: SceneSpec, mesh: TriangleMesh, camera: Camera) -> np.ndarray:
    """Lambertian ``albedo * (ambient + max(0, n.l))`` over the background, H x W x 3."""
    frags = rasterize(camera, mesh.vertices, mesh.triangles, mesh.vertices)
    return _shade_fragments(scene, mesh, camera, frags)


def render_view(scene: SceneSpec, mesh: TriangleMesh, frame: ObjectFrame, camera: Camera):
    """RGB frame and coordinate map from a single rasterizer pass."""
    frags = rasterize(camera, mesh.vertices, mesh.triangles, mesh.vertices)
    rgb = _shade_fragments(scene, mesh, camera, frags)
    frags.attrs = frame.normalize(frags.attrs)
    return rgb, _to_coordmap(frags, frame)


@dataclass
class DatasetSample:
    refs: list[ReferenceUnit]
    frames: np.ndarray                 # M x H x W x 3
    target_maps: list[CoordinateMap]
    cameras: list[Camera]              # N reference cameras then M target cameras
    seed: int = 0
    scene: SceneSpec | None = None
    appearance: np.ndarray | None = None  # M x H x W x 3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= len(self.refs) <= 8:
            raise InvalidInput("a sample holds between 1 and 8 references")
        if len(self.frames) < 1 or len(self.frames) != len(self.target_maps):
            raise InvalidInput("frames and target maps must pair up")

    @property
    def n_refs(self) -> int:
        return len(self.refs)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def to_array(self) -> np.ndarray:
        views = [(u.image, u.coordmap) for u in self.refs] + list(zip(self.frames, self.target_maps))
        rows = [np.concatenate([img, cm.to_array()], axis=-1) for img, cm in views]
        arr = np.stack(rows).astype(np.float32)
        if self.appearance is not None:
            app = np.zeros(arr.shape[:3] + (3,), np.float32)
            app[self.n_refs:] = self.appearance
            arr = np.concatenate([arr, app], axis=-1)
        return arr

    @classmethod
    def from_array(cls, arr: np.ndarray, n_refs: int, cameras=(), seed=0, scene=None, meta=None) -> "DatasetSample":
        if arr.ndim != 4 or arr.shape[-1] not in (SAMPLE_CHANNELS, SAMPLE_CHANNELS + 3):
            raise DatasetCorrupt(f"sample tensor has shape {arr.shape}")
        if not 0 < n_refs < arr.shape[0]:
            raise DatasetCorrupt(f"sample holds {arr.shape[0]} views, cannot split {n_refs} references off")
        maps = [CoordinateMap.from_array(v[..., 3:8]) for v in arr]
        refs = [ReferenceUnit(arr[j, ..., :3].copy(), maps[j]) for j in range(n_refs)]
        app = arr[n_refs:, ..., 8:11].copy() if arr.shape[-1] > SAMPLE_CHANNELS else None
        return cls(refs, arr[n_refs:, ..., :3].copy(), maps[n_refs:], list(cameras), seed, scene, app, meta or {})


def _target_cameras(rng, frame, n_frames, kind, width, height):
    radius = ORBIT_RADIUS * frame.half_extent
    if kind == "orbit":
        start = rng.uniform(0, 2 * math.pi)
        arc = rng.uniform(0.3, 1.2) * rng.choice([-1.0, 1.0])
        el0 = rng.uniform(math.radians(-20), math.radians(35))
        drift = rng.uniform(math.radians(-15), math.radians(15))
        cams = []
        for k in range(n_frames):
            s = k / max(n_frames - 1, 1)
            eye = orbit_position(frame, radius, start + arc * s, el0 + drift * s)
            cams.append(pinhole(width, height, FOV_DEG, look_at(eye, frame.center)))
        return cams
    if kind == "dolly":
        az = rng.uniform(0, 2 * math.pi)
        el = rng.uniform(math.radians(-15), math.radians(30))
        far = rng.uniform(1.1, 1.4)
        cams = []
        for k in range(n_frames):
            s = k / max(n_frames - 1, 1)
            eye = orbit_position(frame, radius * (far + (1.0 - far) * s), az, el)
            cams.append(pinhole(width, height, FOV_DEG, look_at(eye, frame.center)))
        return cams
    raise InvalidInput(f"unknown trajectory kind {kind!r}")


def reference_cameras(frame: ObjectFrame, n_refs: int, width: int, height: int, start: float = 0.0) -> list[Camera]:
    """Even azimuth spacing, alternating above and below the equator."""
    radius = ORBIT_RADIUS * frame.half_extent
    cams = []
    for j in range(n_refs):
        eye = orbit_position(frame, radius, start + 2 * math.pi * j / n_refs, REF_ELEVATIONS[j % 2])
        cams.append(pinhole(width, height, FOV_DEG, look_at(eye, frame.center)))
    return cams


def generate_sample(seed: int, n_refs: int = 3, n_frames: int = 5, trajectory: str = "orbit", *,
                    scene_seed: int | None = None, resolution: int = 32) -> DatasetSample:
    if not 1 <= n_refs <= 8:
        raise InvalidInput("n_refs must lie in [1, 8]")
    if n_frames < 1:
        raise InvalidInput("n_frames must be >= 1")
    scene_seed = seed if scene_seed is None else scene_seed
    scene = generate_scene(scene_seed)
    mesh = scene_mesh(scene)
    frame = normalize_object(mesh)
    rng = make_rng(seed, 0x7EA1)
    if trajectory == "mixed":
        trajectory = "orbit" if rng.random() < 0.7 else "dolly"
    start = make_rng(scene_seed, 0xA21).uniform(0, 2 * math.pi)
    ref_cams = reference_cameras(frame, n_refs, resolution, resolution, start)
    tgt_cams = _target_cameras(rng, frame, n_frames, trajectory, resolution, resolution)
    refs = []
    for cam in ref_cams:
        rgb, cmap = render_view(scene, mesh, frame, cam)
        refs.append(ReferenceUnit(rgb, cmap))
    frames, maps = [], []
    for cam in tgt_cams:
        rgb, cmap = render_view(scene, mesh, frame, cam)
        frames.append(rgb)
        maps.append(cmap)
    return DatasetSample(refs, np.stack(frames).astype(np.float32), maps, ref_cams + tgt_cams, seed, scene,
                         meta={"scene_seed": scene_seed, "trajectory": trajectory})


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 64
    resolution: int = 32
    n_refs: int = 3
    n_frames: int = 5
    trajectory: str = "mixed"
    seed: int = 0


def generate_dataset(cfg: DatasetConfig) -> list[DatasetSample]:
    return [generate_sample(cfg.seed * 100003 + i, cfg.n_refs, cfg.n_frames, cfg.trajectory, resolution=cfg.resolution)
            for i in range(cfg.count)]


def write_dataset(samples: list[DatasetSample], directory, config: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.gort"
        tensorio.save(directory / name, s.to_array())
        entries.append({"file": name, "seed": s.seed, "n_refs": s.n_refs, "n_frames": s.n_frames,
                        "cameras": [c.to_dict() for c in s.cameras],
                        "scene": s.scene.to_dict() if s.scene else None, "meta": s.meta})
    index = {"format": "gorender-dataset", "version": 1, "config": config or {}, "count": len(samples),
             "seeds": [s.seed for s in samples], "samples": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory


def read_dataset(directory) -> list[DatasetSample]:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetCorrupt(f"{directory}: missing index.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetCorrupt(f"{directory}/index.json: {exc}") from exc
    samples = []
    for e in index.get("samples", []):
        path = directory / e["file"]
        if not path.exists():
            raise DatasetCorrupt(f"{path}: listed in index.json but missing")
        try:
            arr = tensorio.load(path)
        except ContainerError as exc:
            raise DatasetCorrupt(str(exc)) from exc
        cams = [Camera.from_dict(c) for c in e.get("cameras", [])]
        scene = SceneSpec.from_dict(e["scene"]) if e.get("scene") else None
        samples.append(DatasetSample.from_array(arr, e["n_refs"], cams, e.get("seed", 0), scene, e.get("meta")))
    if len(samples) != index.get("count", len(samples)):
        raise DatasetCorrupt(f"{directory}: index count does not match sample list")
    return samples
