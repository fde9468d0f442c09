import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from gorender import tensorio
from gorender.coordmap import rasterize_mesh, raycast
from gorender.errors import DatasetCorrupt, InvalidInput
from gorender.geometry import look_at, normalize_object, pinhole, project
from gorender.synthdata import (KINDS, DatasetConfig, Primitive, SceneSpec, background_image, generate_dataset,
                                generate_sample, generate_scene, read_dataset, reference_cameras, scene_mesh, shade,
                                write_dataset)


def test_scene_deterministic():
    assert generate_scene(17) == generate_scene(17)
    assert generate_scene(17) != generate_scene(18)


def test_all_kinds_occur_and_light_is_unit():
    counts = Counter()
    for seed in range(1000):
        scene = generate_scene(seed)
        counts[scene.kind] += 1
        assert abs(np.dot(scene.light, scene.light) - 1.0) < 1e-12
        if scene.kind == "composite":
            assert 2 <= len(scene.parts) <= 3
    assert set(counts) == set(KINDS)


def test_scene_validation():
    ok = generate_scene(3)
    with pytest.raises(InvalidInput):
        replace(ok, light=(1.0, 1.0, 0.0))
    with pytest.raises(InvalidInput):
        replace(ok, ambient=1.5)
    with pytest.raises(InvalidInput):
        replace(ok, palette=((1.2, 0.0, 0.0),))
    assert SceneSpec.from_dict(json.loads(json.dumps(ok.to_dict()))) == ok


def _cube_scene(palette, light, ambient):
    return SceneSpec("cube", (Primitive("cube"),), palette, light, ambient, ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)))


def test_flat_albedo_when_ambient_only():
    scene = _cube_scene(((0.3, 0.6, 0.9),), (0.0, -1.0, 0.0), 1.0)
    mesh = scene_mesh(scene)
    # camera above the cube: every visible face points away from a light that shines from below
    cam = pinhole(32, 32, 60, look_at([0.5, 4.0, 0.3], [0, 0, 0]))
    img = shade(scene, mesh, cam)
    fg = rasterize_mesh(mesh, normalize_object(mesh), cam).mask
    assert fg.any()
    assert np.allclose(img[fg], (0.3, 0.6, 0.9), atol=1e-6)
    assert not img[~fg].any()


def test_perpendicular_face_is_ambient_only():
    scene = _cube_scene(((0.8, 0.4, 0.2),), (1.0, 0.0, 0.0), 0.3)
    mesh = scene_mesh(scene)
    # looking straight at the +z face, whose normal is perpendicular to the light
    cam = pinhole(32, 32, 40, look_at([0, 0, 5.0], [0, 0, 0]))
    img = shade(scene, mesh, cam)
    assert np.allclose(img[16, 16], np.array([0.8, 0.4, 0.2]) * 0.3, atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_silhouette_matches_coordmap(seed):
    scene = generate_scene(seed)
    mesh = scene_mesh(scene)
    frame = normalize_object(mesh)
    cam = reference_cameras(frame, 3, 48, 48, 0.3 * seed)[seed % 3]
    # a background color no face can produce makes the shaded silhouette observable
    scene = replace(scene, background=((1.0, 0.0, 1.0), (1.0, 0.0, 1.0)), palette=((0.5, 0.5, 0.5),), ambient=0.2)
    img = shade(scene, mesh, cam)
    shaded = ~np.all(img == np.array([1.0, 0.0, 1.0], np.float32), axis=-1)
    assert np.array_equal(shaded, rasterize_mesh(mesh, frame, cam).mask)


def test_background_gradient():
    scene = replace(generate_scene(0), background=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
    bg = background_image(scene, 4, 8)
    assert np.all(np.diff(bg[:, 0, 0]) > 0)
    assert np.array_equal(bg[:, 0], bg[:, 3])


def test_sample_deterministic_bytes():
    a = generate_sample(11, 2, 5, "orbit")
    b = generate_sample(11, 2, 5, "orbit")
    assert tensorio.encode(a.to_array()) == tensorio.encode(b.to_array())
    assert a.n_refs == 2 and a.n_frames == 5 and len(a.cameras) == 7


@pytest.mark.parametrize("trajectory", ["orbit", "dolly", "mixed"])
def test_foreground_alignment(trajectory):
    s = generate_sample(5, 3, 4, trajectory)
    bg = background_image(s.scene, 32, 32)
    for frame, cm in zip(s.frames, s.target_maps):
        assert np.array_equal(frame[~cm.mask], bg[~cm.mask])
        assert cm.mask.any()
    for u in s.refs:
        assert u.coordmap.mask.any()


def test_shared_scene_seed_shares_reference_colors():
    a = generate_sample(100, 3, 3, "orbit", scene_seed=9)
    b = generate_sample(200, 3, 3, "orbit", scene_seed=9)
    assert a.scene == b.scene
    for ua, ub in zip(a.refs, b.refs):
        assert np.array_equal(ua.image, ub.image)
    assert not np.array_equal(a.frames, b.frames)


def test_sample_preconditions():
    with pytest.raises(InvalidInput):
        generate_sample(0, 0, 2)
    with pytest.raises(InvalidInput):
        generate_sample(0, 9, 2)
    with pytest.raises(InvalidInput):
        generate_sample(0, 2, 0)
    with pytest.raises(InvalidInput):
        generate_sample(0, 2, 2, "spiral")


def test_dataset_round_trip(tmp_path):
    cfg = DatasetConfig(count=3, resolution=16, n_refs=2, n_frames=2, seed=4)
    samples = generate_dataset(cfg)
    write_dataset(samples, tmp_path, cfg.__dict__)
    index = json.loads((tmp_path / "index.json").read_text())
    assert index["count"] == 3 and index["seeds"] == [s.seed for s in samples]
    assert [e["file"] for e in index["samples"]] == [f"sample_{i:05d}.gort" for i in range(3)]
    back = read_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert np.array_equal(a.to_array(), b.to_array())
        assert a.scene == b.scene and a.seed == b.seed
        assert [c.to_dict() for c in a.cameras] == [c.to_dict() for c in b.cameras]


def test_dataset_generation_is_pure():
    cfg = DatasetConfig(count=2, resolution=16, n_refs=2, n_frames=2, seed=1)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert all(np.array_equal(x.to_array(), y.to_array()) for x, y in zip(a, b))


def test_dataset_corruption(tmp_path):
    samples = generate_dataset(DatasetConfig(count=2, resolution=16, n_refs=1, n_frames=1))
    write_dataset(samples, tmp_path)
    (tmp_path / "sample_00001.gort").unlink()
    with pytest.raises(DatasetCorrupt):
        read_dataset(tmp_path)
    (tmp_path / "sample_00000.gort").write_bytes(b"junk")
    with pytest.raises(DatasetCorrupt):
        read_dataset(tmp_path)
    with pytest.raises(DatasetCorrupt):
        read_dataset(tmp_path / "nowhere")


def _visible_vertices(mesh, cam):
    tri, depth = raycast(mesh, cam)
    seen = np.zeros(len(mesh.vertices), bool)
    for i, p in enumerate(mesh.vertices):
        uvz = project(cam, p)
        if uvz is None:
            continue
        u, v, z = uvz
        x, y = int(u), int(v)
        if not (0 <= x < cam.width and 0 <= y < cam.height):
            continue
        # a vertex counts as seen when the nearest hit near its pixel is not in front of it
        ys, xs = slice(max(y - 1, 0), y + 2), slice(max(x - 1, 0), x + 2)
        d = depth[ys, xs]
        seen[i] = np.any(np.isfinite(d) & (d >= z - 0.02 * z))
    return seen


@pytest.mark.parametrize("kind", ["cube", "uv-sphere", "cylinder"])
def test_reference_coverage(kind):
    seeds = [s for s in range(300) if generate_scene(s).kind == kind][:3]
    for seed in seeds:
        s = generate_sample(seed, 3, 1, "orbit", resolution=64)
        mesh = scene_mesh(s.scene)
        seen = np.zeros(len(mesh.vertices), bool)
        for cam in s.cameras[:3]:
            seen |= _visible_vertices(mesh, cam)
        assert seen.mean() > 0.8, (kind, seed, seen.mean())
