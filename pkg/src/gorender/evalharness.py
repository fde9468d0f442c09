"""Image metrics, the coordinate-perturbation sweep and the gap ablation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .conditioning import perturb_coordmap
from .errors import InvalidInput
from .rng import make_rng

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
REC601 = np.array([0.299, 0.587, 0.114])
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.2, 0.4)
DEFAULT_GAPS = (0, 1, 3, 5, 10)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for data range 1; identical inputs report ``PSNR_CAP``."""
    a, b = _check_pair(a, b)
    err = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        err = err[m]
        if err.size == 0:
            return PSNR_CAP
    mse = float(np.mean(err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ REC601 if img.ndim == 3 and img.shape[-1] == 3 else img


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    x, y = luminance(a), luminance(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InvalidInput(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} frames")
    g = _gauss_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) on Rec.601 luminance, valid region only."""
    return float(np.mean(ssim_map(a, b)))


def frame_metrics(pred: np.ndarray, truth: np.ndarray, masks=None) -> tuple[float, float]:
    """Mean PSNR and SSIM over a stack of frames."""
    ps, ss = [], []
    for k in range(len(truth)):
        ps.append(psnr(pred[k], truth[k], None if masks is None else masks[k]))
        ss.append(ssim(pred[k], truth[k]))
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class Row:
    key: float
    psnr: float
    ssim: float
    loss: float | None = None


class Table:
    def __init__(self, key: str, rows: list[Row], with_loss: bool = False):
        self.key = key
        self.rows = rows
        self.with_loss = with_loss

    @property
    def columns(self) -> list[str]:
        return [self.key, "final_loss", "psnr", "ssim"] if self.with_loss else [self.key, "psnr", "ssim"]

    def records(self) -> list[dict]:
        out = []
        for r in self.rows:
            rec = {self.key: r.key}
            if self.with_loss:
                rec["final_loss"] = r.loss
            rec["psnr"] = r.psnr
            rec["ssim"] = r.ssim
            out.append(rec)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for rec in self.records():
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.records()}, indent=1)

    def __str__(self) -> str:
        return self.to_csv()


def evaluate(model, dataset, *, steps: int = 20, guidance: float = 1.0, seed: int = 0, sigma: float = 0.0,
             foreground_only: bool = False) -> tuple[float, float]:
    """Mean PSNR/SSIM of sampled frames against the dataset targets."""
    from .minidiffusion.flow import sample

    ps, ss = [], []
    for i, s in enumerate(dataset):
        maps = s.target_maps
        if sigma > 0:
            rng = make_rng(seed, 0x9E37, i)
            maps = [perturb_coordmap(cm, sigma, rng) for cm in maps]
        frames = sample(model, s.refs, maps, s.appearance, steps, guidance, seed + i)
        masks = [cm.mask for cm in s.target_maps] if foreground_only else None
        p, q = frame_metrics(frames, s.frames, masks)
        ps.append(p)
        ss.append(q)
    return float(np.mean(ps)), float(np.mean(ss))


def robustness_sweep(model, dataset, sigmas=DEFAULT_SIGMAS, seed: int = 0, *, steps: int = 20,
                     guidance: float = 1.0, foreground_only: bool = False) -> Table:
    """One row per sigma: target coordinate maps jittered at inference, references untouched."""
    rows = []
    for sigma in sigmas:
        if sigma < 0:
            raise InvalidInput("sigma must be >= 0")
        p, q = evaluate(model, dataset, steps=steps, guidance=guidance, seed=seed, sigma=float(sigma),
                        foreground_only=foreground_only)
        rows.append(Row(float(sigma), p, q))
    return Table("sigma", rows)


def g_ablation(dataset, gaps=DEFAULT_GAPS, *, model_config=None, train_config=None, eval_steps: int = 20,
               seed: int = 0, progress=None) -> Table:
    """Train one model per gap from the same seed; report final loss and sample quality."""
    from .minidiffusion.flow import TrainConfig, evaluation_loss, train
    from .minidiffusion.model import DiTConfig, MiniDiT

    base = model_config or DiTConfig()
    tcfg = train_config or TrainConfig()
    rows = []
    for g in gaps:
        if g < 0:
            raise InvalidInput("gap must be >= 0")
        model = MiniDiT(replace(base, gap=int(g)), seed=seed)
        train(model, dataset, tcfg)
        final = evaluation_loss(model, dataset, seed=seed)
        p, q = evaluate(model, dataset, steps=eval_steps, seed=seed)
        rows.append(Row(float(g), p, q, final))
        if progress is not None:
            progress(rows[-1])
    return Table("g", rows, with_loss=True)
