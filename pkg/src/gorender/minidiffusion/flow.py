"""Rectified-flow objective, training loop and Euler sampler.

Time runs from data (t = 0) to noise (t = 1): ``x_t = (1 - t) x1 + t x0``.
The network regresses ``x1 - x0``; sampling starts from noise at t = 1
and steps toward t = 0 along the predicted velocity.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..conditioning import (ConditioningSequence, ReferenceUnit, TargetUnit, assemble, patchify,
                            scale_translate_coordmap, unpatchify)
from ..coordmap import CoordinateMap
from ..errors import InvalidInput, TrainingDiverged
from ..rng import gaussian, make_rng
from .model import MiniDiT

log = logging.getLogger(__name__)


def to_latent(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float32) * 2.0 - 1.0


def from_latent(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)


def build_sequence(model: MiniDiT, refs: list[ReferenceUnit], maps: list[CoordinateMap], latent: np.ndarray,
                   appearance: np.ndarray | None = None, gap: int | None = None) -> ConditioningSequence:
    targets = [TargetUnit(cm, latent[k], None if appearance is None else appearance[k]) for k, cm in enumerate(maps)]
    return assemble(refs, targets, model.cfg.gap if gap is None else gap, model.cfg.patch)


def velocity(model: MiniDiT, seq: ConditioningSequence, t: float, drop_refs: bool = False) -> np.ndarray:
    out, _ = model.forward(seq, t, drop_refs)
    lay = seq.layout
    return unpatchify(out, lay.n_frames, lay.height, lay.width, lay.patch)


def flow_pair(x1: np.ndarray, t: float, noise_seed: int):
    """(x_t, target velocity) for data ``x1`` and a seeded noise draw."""
    x0 = gaussian(make_rng(noise_seed, 0xF10), x1.shape, np.float64).astype(x1.dtype)
    return (1.0 - t) * x1 + t * x0, x1 - x0


def _loss_and_grad(model, refs, maps, x1, appearance, t, x0_seed, drop, need_grad):
    xt, v_target = flow_pair(x1, t, x0_seed)
    seq = build_sequence(model, refs, maps, xt.astype(model.dtype), appearance)
    out, cache = model.forward(seq, t, drop)
    target = patchify(v_target.astype(model.dtype), model.cfg.patch)
    diff = out - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = model.backward(2.0 * diff / diff.size, cache) if need_grad else None
    return loss, grad


def loss(model: MiniDiT, sample, t: float, noise_seed: int, drop_refs: bool = False) -> float:
    """MSE between predicted and true velocity over target entries only."""
    x1 = to_latent(sample.frames).astype(model.dtype)
    value, _ = _loss_and_grad(model, sample.refs, sample.target_maps, x1, sample.appearance, t, noise_seed,
                              drop_refs, False)
    return value


def loss_and_grad(model: MiniDiT, sample, t: float, noise_seed: int, drop_refs: bool = False):
    x1 = to_latent(sample.frames).astype(model.dtype)
    return _loss_and_grad(model, sample.refs, sample.target_maps, x1, sample.appearance, t, noise_seed,
                          drop_refs, True)


def evaluation_loss(model: MiniDiT, samples, seed: int = 0, n_t: int = 8) -> float:
    """Deterministic objective estimate on a fixed t grid and fixed noise."""
    ts = (np.arange(n_t) + 0.5) / n_t
    vals = [loss(model, s, float(t), seed * 7919 + 31 * i + k) for i, s in enumerate(samples) for k, t in enumerate(ts)]
    return float(np.mean(vals))


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    warmup: int = 100
    schedule: str = "cosine"
    min_lr_ratio: float = 0.05
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 1
    cfg_dropout: float = 0.1
    shuffle_refs: bool = True
    min_refs: int | None = None
    aug_scale: float = 0.05
    aug_translate: float = 0.05
    seed: int = 0
    log_every: int = 0

    def lr_at(self, step: int) -> float:
        if self.lr == 0:
            return 0.0
        warm = min(1.0, (step + 1) / self.warmup) if self.warmup > 0 else 1.0
        if self.schedule == "constant":
            return self.lr * warm
        if self.schedule == "cosine":
            frac = step / max(self.steps - 1, 1)
            floor = self.min_lr_ratio
            return self.lr * warm * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))
        raise InvalidInput(f"unknown lr schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MiniDiT
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


class AdamW:
    def __init__(self, size: int, cfg: TrainConfig, dtype=np.float32):
        self.cfg = cfg
        self.m = np.zeros(size, dtype)
        self.v = np.zeros(size, dtype)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        c = self.cfg
        self.t += 1
        self.m *= c.beta1
        self.m += (1 - c.beta1) * grad
        self.v *= c.beta2
        self.v += (1 - c.beta2) * grad * grad
        if lr == 0.0:
            return
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        update = mhat / (np.sqrt(vhat) + c.eps)
        if c.weight_decay:
            update += c.weight_decay * params
        params -= (lr * update).astype(params.dtype)


def augment(sample, rng: np.random.Generator, cfg: TrainConfig):
    """Reference shuffle/subset plus one shared scale/translation of the proxy coordinates."""
    refs = list(sample.refs)
    order = rng.permutation(len(refs)) if cfg.shuffle_refs else np.arange(len(refs))
    if cfg.min_refs is not None and cfg.min_refs < len(refs):
        keep = int(rng.integers(cfg.min_refs, len(refs) + 1))
        order = order[:keep]
    refs = [refs[i] for i in order]
    maps = list(sample.target_maps)
    if cfg.aug_scale or cfg.aug_translate:
        s = 1.0 + rng.uniform(-cfg.aug_scale, cfg.aug_scale)
        tr = rng.uniform(-cfg.aug_translate, cfg.aug_translate, 3)
        refs = [ReferenceUnit(u.image, scale_translate_coordmap(u.coordmap, s, tr)) for u in refs]
        maps = [scale_translate_coordmap(cm, s, tr) for cm in maps]
    return refs, maps


def train(model: MiniDiT, dataset, cfg: TrainConfig, callback=None) -> TrainResult:
    """AdamW on the rectified-flow loss; mutates ``model.params`` in place."""
    if not dataset:
        raise InvalidInput("dataset is empty")
    rng = make_rng(cfg.seed, 0x7A1)
    opt = AdamW(model.params.size, cfg, model.dtype)
    result = TrainResult(model)
    start = time.perf_counter()
    for step in range(cfg.steps):
        grad_sum = np.zeros(model.params.size, np.float64)
        step_loss = 0.0
        for _ in range(cfg.batch_size):
            sample = dataset[int(rng.integers(len(dataset)))]
            refs, maps = augment(sample, rng, cfg)
            t = float(rng.random())
            drop = bool(rng.random() < cfg.cfg_dropout)
            x1 = to_latent(sample.frames).astype(model.dtype)
            value, g = _loss_and_grad(model, refs, maps, x1, sample.appearance, t, int(rng.integers(2 ** 62)),
                                      drop, True)
            step_loss += value / cfg.batch_size
            grad_sum += g.flat
        if not math.isfinite(step_loss):
            raise TrainingDiverged(f"loss became {step_loss} at step {step} (lr {cfg.lr_at(step):.3g})")
        grad = grad_sum / cfg.batch_size
        norm = float(np.sqrt(np.dot(grad, grad)))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grad *= cfg.grad_clip / norm
        opt.step(model.params.flat, grad.astype(model.dtype), cfg.lr_at(step))
        result.losses.append(step_loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f |g| %.3f", step, step_loss, norm)
        if callback is not None:
            callback(step, step_loss)
    result.seconds = time.perf_counter() - start
    return result


def sample(model: MiniDiT, refs: list[ReferenceUnit], maps: list[CoordinateMap],
           appearance: np.ndarray | None = None, steps: int = 20, guidance: float = 1.0, seed: int = 0,
           gap: int | None = None) -> np.ndarray:
    """Euler integration from noise at t = 1 to data at t = 0; returns M x H x W x C in [0, 1].

    With ``guidance != 1`` the velocity is ``v_u + w (v_c - v_u)``, the
    unconditional branch replacing every reference token by the null embedding.
    """
    if steps < 1:
        raise InvalidInput("need at least one sampling step")
    h, w = maps[0].height, maps[0].width
    x = gaussian(make_rng(seed, 0x5A3), (len(maps), h, w, model.cfg.channels)).astype(model.dtype)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        seq = build_sequence(model, refs, maps, x, appearance, gap)
        v = velocity(model, seq, t)
        if guidance != 1.0:
            v_u = velocity(model, seq, t, drop_refs=True)
            v = v_u + guidance * (v - v_u)
        x = x + dt * v
    return from_latent(x)


def sample_for(model: MiniDiT, s, steps: int = 20, guidance: float = 1.0, seed: int = 0, maps=None) -> np.ndarray:
    return sample(model, s.refs, s.target_maps if maps is None else maps, s.appearance, steps, guidance, seed)
