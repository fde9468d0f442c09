"""3D rotary embeddings over (t, h, w) token indices.

Reference tokens get negative temporal indices spaced by a gap ``g``
ahead of the zero-based target frames, so references stay separated from
the generated clip instead of reading as its immediate history.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput

DEFAULT_GAP = 3
DEFAULT_THETA = 10000.0


class TokenIndex3D(NamedTuple):
    t: int
    h: int
    w: int


def default_split(head_dim: int) -> tuple[int, int, int]:
    """Largest equal even share for h and w that still leaves >= 2 dims for t."""
    if head_dim < 6 or head_dim % 2:
        raise InvalidInput("head_dim must be even and >= 6")
    hw = (head_dim - 2) // 2
    hw -= hw % 2
    return head_dim - 2 * hw, hw, hw


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = 16
    split: tuple[int, int, int] | None = None
    theta_base: float = DEFAULT_THETA

    def __post_init__(self):
        split = tuple(self.split) if self.split is not None else default_split(self.head_dim)
        if sum(split) != self.head_dim or any(d < 2 or d % 2 for d in split):
            raise InvalidInput(f"invalid rope split {split} for head_dim {self.head_dim}")
        if not self.theta_base > 0:
            raise InvalidInput("theta_base must be positive")
        object.__setattr__(self, "split", split)

    def frequencies(self) -> list[np.ndarray]:
        return [self.theta_base ** (-2.0 * np.arange(d // 2) / d) for d in self.split]


def temporal_indices(n_refs: int, n_frames: int, gap: int = DEFAULT_GAP) -> list[int]:
    """``[-N*g, ..., -g, 0, 1, ..., M-1]``."""
    if n_refs < 0 or n_frames < 1 or gap < 0:
        raise InvalidInput("need N >= 0, M >= 1, g >= 0")
    return [-(n_refs - j) * gap for j in range(n_refs)] + list(range(n_frames))


def rope_phases(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Phases for an (L, 3) array of (t, h, w) indices -> (L, head_dim / 2)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([pos[:, a:a + 1] * f[None, :] for a, f in enumerate(cfg.frequencies())], axis=1)


def rope_rotation(idx, cfg: RopeConfig) -> np.ndarray:
    """Phases for a single TokenIndex3D, ordered t, h, w."""
    return rope_phases(np.asarray(idx, dtype=np.float64)[None, :], cfg)[0]


def apply_rope(x: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs (x[2i], x[2i+1]) by ``phases[..., i]``.

    ``x`` is (..., head_dim); ``phases`` broadcasts against (..., head_dim / 2).
    """
    cos, sin = np.cos(phases).astype(x.dtype), np.sin(phases).astype(x.dtype)
    return rotate_pairs(x, cos, sin)


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
