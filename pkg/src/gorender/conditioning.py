"""Joint reference structure: channel packing and token assembly.

Reference views are packed as ``[R, G, B, Cx, Cy, Cz, mask]`` and target
frames as ``[latent..., Cx, Cy, Cz, mask, Ar, Ag, Ab, has_A]``. Both are
patchified into one sequence, references first, with 3D rope indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .coordmap import CoordinateMap, decode_coord, encode_coord
from .errors import InvalidInput
from .rng import gaussian, make_rng
from .rope3d import DEFAULT_GAP, temporal_indices

REF_CHANNELS = 7
LATENT_CHANNELS = 3
TARGET_COND_CHANNELS = 8  # coords 3 + mask 1 + appearance 3 + has_A 1
DEFAULT_PATCH = 2

# fixed channel offsets within a packed stack
REF_RGB = slice(0, 3)
REF_COORDS = slice(3, 6)
REF_MASK = 6


def target_channels(latent_channels: int = LATENT_CHANNELS) -> int:
    return latent_channels + TARGET_COND_CHANNELS


def target_slices(latent_channels: int = LATENT_CHANNELS) -> dict[str, slice | int]:
    c = latent_channels
    return {"latent": slice(0, c), "coords": slice(c, c + 3), "mask": c + 3,
            "appearance": slice(c + 4, c + 7), "has_appearance": c + 7}


@dataclass
class ReferenceUnit:
    image: np.ndarray
    coordmap: CoordinateMap

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.shape != self.coordmap.coords.shape:
            raise InvalidInput(f"reference image {self.image.shape} does not match coordinate map "
                               f"{self.coordmap.coords.shape}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise InvalidInput("reference image values must lie in [0, 1]")


@dataclass
class TargetUnit:
    coordmap: CoordinateMap
    latent: np.ndarray
    appearance: np.ndarray | None = None

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=np.float32)
        hw = self.coordmap.coords.shape[:2]
        if self.latent.shape[:2] != hw:
            raise InvalidInput(f"latent {self.latent.shape} does not match coordinate map {hw}")
        if self.appearance is not None:
            self.appearance = np.asarray(self.appearance, dtype=np.float32)
            if self.appearance.shape != (*hw, 3):
                raise InvalidInput("appearance guidance must be H x W x 3")


def pack_reference(unit: ReferenceUnit) -> np.ndarray:
    cm = unit.coordmap
    return np.concatenate([unit.image, cm.coords, cm.validity[..., None].astype(np.float32)], axis=-1)


def unpack_reference(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`pack_reference`: (image, coords, validity). Depth is not packed."""
    return stack[..., REF_RGB].copy(), stack[..., REF_COORDS].copy(), stack[..., REF_MASK].astype(np.uint8)


def pack_target(unit: TargetUnit) -> np.ndarray:
    cm = unit.coordmap
    h, w = cm.coords.shape[:2]
    if unit.appearance is None:
        app, flag = np.zeros((h, w, 3), np.float32), np.zeros((h, w, 1), np.float32)
    else:
        app, flag = unit.appearance, np.ones((h, w, 1), np.float32)
    return np.concatenate([unit.latent, cm.coords, cm.validity[..., None].astype(np.float32), app, flag], axis=-1)


def pack_targets(units: list[TargetUnit]) -> np.ndarray:
    present = {u.appearance is not None for u in units}
    if len(present) > 1:
        raise InvalidInput("appearance guidance must be present for all target frames or for none")
    return np.stack([pack_target(u) for u in units])


def unpack_target(stack: np.ndarray, latent_channels: int = LATENT_CHANNELS):
    """(latent, coords, validity, appearance or None) from one packed target frame."""
    s = target_slices(latent_channels)
    has = bool(stack[..., s["has_appearance"]].max() > 0.5) if stack.size else False
    app = stack[..., s["appearance"]].copy() if has else None
    return stack[..., s["latent"]].copy(), stack[..., s["coords"]].copy(), stack[..., s["mask"]].astype(np.uint8), app


def patchify(stack: np.ndarray, patch: int) -> np.ndarray:
    """frames x H x W x C -> (frames*Hp*Wp) x (p*p*C), raster order t, h, w."""
    f, h, w, c = stack.shape
    if patch < 1 or h % patch or w % patch:
        raise InvalidInput(f"image {h}x{w} is not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = stack.reshape(f, hp, patch, wp, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(f * hp * wp, patch * patch * c)


def unpatchify(tokens: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    hp, wp = height // patch, width // patch
    c = tokens.shape[-1] // (patch * patch)
    if tokens.shape[0] != frames * hp * wp or tokens.shape[-1] != patch * patch * c:
        raise InvalidInput(f"{tokens.shape} tokens do not fit layout {frames}x{height}x{width}/p{patch}")
    x = tokens.reshape(frames, hp, wp, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(frames, height, width, c)


@dataclass(frozen=True)
class Layout:
    n_refs: int
    n_frames: int
    hp: int
    wp: int
    patch: int

    @property
    def tokens_per_frame(self) -> int:
        return self.hp * self.wp

    @property
    def n_ref_tokens(self) -> int:
        return self.n_refs * self.tokens_per_frame

    @property
    def n_target_tokens(self) -> int:
        return self.n_frames * self.tokens_per_frame

    @property
    def n_tokens(self) -> int:
        return self.n_ref_tokens + self.n_target_tokens

    @property
    def height(self) -> int:
        return self.hp * self.patch

    @property
    def width(self) -> int:
        return self.wp * self.patch

    def target_slice(self) -> slice:
        return slice(self.n_ref_tokens, self.n_tokens)


def grid_positions(layout: Layout, gap: int) -> np.ndarray:
    """(L, 3) integer (t, h, w) indices; references reuse the spatial grid."""
    ts = temporal_indices(layout.n_refs, layout.n_frames, gap)
    hh, ww = np.meshgrid(np.arange(layout.hp), np.arange(layout.wp), indexing="ij")
    grid = np.stack([hh.ravel(), ww.ravel()], axis=1)
    rows = [np.concatenate([np.full((len(grid), 1), t), grid], axis=1) for t in ts]
    return np.concatenate(rows).astype(np.int64)


@dataclass
class ConditioningSequence:
    ref_tokens: np.ndarray      # n_ref_tokens x 7p^2
    target_tokens: np.ndarray   # n_target_tokens x (C_x + 8)p^2
    positions: np.ndarray       # n_tokens x 3, (t, h, w)
    layout: Layout
    target_stack: np.ndarray = field(repr=False)  # frames x H x W x (C_x + 8)
    gap: int = DEFAULT_GAP

    @property
    def is_reference(self) -> np.ndarray:
        flags = np.zeros(self.layout.n_tokens, bool)
        flags[: self.layout.n_ref_tokens] = True
        return flags

    def __len__(self) -> int:
        return self.layout.n_tokens

    def with_latent(self, latent: np.ndarray) -> "ConditioningSequence":
        """Copy with the target latent block replaced (frames x H x W x C_x)."""
        stack = self.target_stack.copy()
        stack[..., : latent.shape[-1]] = latent
        return replace(self, target_stack=stack, target_tokens=patchify(stack, self.layout.patch))

    def shifted(self, offset: int) -> "ConditioningSequence":
        """Every temporal index moved by ``offset``."""
        pos = self.positions.copy()
        pos[:, 0] += offset
        return replace(self, positions=pos)


def assemble(refs: list[ReferenceUnit], targets: list[TargetUnit], gap: int = DEFAULT_GAP,
             patch: int = DEFAULT_PATCH) -> ConditioningSequence:
    if not refs or not targets:
        raise InvalidInput("need at least one reference and one target frame")
    shape = refs[0].coordmap.coords.shape[:2]
    for u in [*refs, *targets]:
        if u.coordmap.coords.shape[:2] != shape:
            raise InvalidInput(f"resolution mismatch: {u.coordmap.coords.shape[:2]} vs {shape}")
    h, w = shape
    if h % patch or w % patch:
        raise InvalidInput(f"image {h}x{w} is not divisible by patch size {patch}")
    layout = Layout(len(refs), len(targets), h // patch, w // patch, patch)
    ref_stack = np.stack([pack_reference(u) for u in refs])
    tgt_stack = pack_targets(targets)
    return ConditioningSequence(patchify(ref_stack, patch), patchify(tgt_stack, patch),
                                grid_positions(layout, gap), layout, tgt_stack, gap)


def _map_valid_coords(cmap: CoordinateMap, fn) -> CoordinateMap:
    coords = cmap.coords.copy()
    valid = cmap.mask
    p = decode_coord(coords[valid])
    coords[valid] = encode_coord(fn(p)).astype(np.float32)
    return CoordinateMap(coords, cmap.validity.copy(), cmap.depth.copy())


def perturb_coordmap(cmap: CoordinateMap, sigma: float, rng: np.random.Generator) -> CoordinateMap:
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    if sigma == 0:
        return CoordinateMap(cmap.coords.copy(), cmap.validity.copy(), cmap.depth.copy())
    n = int(cmap.validity.sum())
    noise = gaussian(rng, (n, 3)) * sigma
    return _map_valid_coords(cmap, lambda p: np.clip(p + noise, -1.0, 1.0))


def perturb_coordmaps(targets: list[TargetUnit], sigma: float, seed: int) -> list[TargetUnit]:
    """I.i.d. Gaussian jitter (object-frame units) on every valid target coordinate."""
    rng = make_rng(seed, 0x9E37)
    return [replace(u, coordmap=perturb_coordmap(u.coordmap, sigma, rng)) for u in targets]


def scale_translate_coordmap(cmap: CoordinateMap, scale: float, translation) -> CoordinateMap:
    t = np.asarray(translation, dtype=np.float64)
    return _map_valid_coords(cmap, lambda p: np.clip(p * scale + t, -1.0, 1.0))
