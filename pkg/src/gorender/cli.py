"""``gorender`` command line.

Every option can also come from a JSON file passed with ``--config``.
Top-level keys apply to all commands; a key named after the command
(``"train"``, ``"ablate_g"``, ...) holds overrides for that command only.
Explicit flags beat the config file, which beats built-in defaults.

Exit codes: 0 success, 1 internal error, 2 input error, 3 threshold failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio
from .conditioning import Layout, ReferenceUnit
from .coordmap import CoordinateMap, rasterize_mesh, splat_points
from .errors import ContainerError, DatasetCorrupt, InvalidInput
from .geometry import PointCloud, load_cameras, load_proxy, normalize_object
from .rope3d import RopeConfig, rope_phases, temporal_indices

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_THRESHOLD = 0, 1, 2, 3

log = logging.getLogger("gorender")


class ThresholdFailure(Exception):
    pass


class _Options:
    """Registers flags with a ``None`` default so config values can fill the gaps.

    Required flags are checked after the config merge, so a config file can
    supply them too.
    """

    def __init__(self, parser: argparse.ArgumentParser, spec: dict):
        self.parser = parser
        self.spec = spec

    def add(self, flag: str, default=None, help: str = "", *, type=None, required: bool = False, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.spec[dest] = (default, type, required)
        shown = " (required)" if required else f" (default: {default})" if default is not None else ""
        if type is not None:
            kw["type"] = type
        self.parser.add_argument(flag, dest=dest, default=None, help=help + shown, **kw)


def _command(sub, name: str, help: str, func) -> _Options:
    p = sub.add_parser(name, help=help, description=help)
    spec: dict = {}
    p.set_defaults(func=func, spec=spec)
    return _Options(p, spec)


def _model_flags(o: _Options) -> None:
    o.add("--dim", 64, "transformer width", type=int)
    o.add("--depth", 4, "number of blocks", type=int)
    o.add("--heads", 4, "attention heads", type=int)
    o.add("--patch", 2, "patch size", type=int)
    o.add("--gap", 3, "temporal gap between references and targets", type=int)


def _train_flags(o: _Options) -> None:
    o.add("--steps", 2000, "optimizer steps", type=int)
    o.add("--lr", 1e-3, "peak learning rate", type=float)
    o.add("--warmup", 100, "linear warmup steps", type=int)
    o.add("--schedule", "cosine", "learning-rate schedule", choices=["cosine", "constant"])
    o.add("--batch-size", 1, "samples per step", type=int)
    o.add("--cfg-dropout", 0.1, "probability of dropping all references", type=float)
    o.add("--grad-clip", 1.0, "global gradient-norm clip", type=float)
    o.add("--weight-decay", 0.0, "decoupled weight decay", type=float)
    o.add("--aug-scale", 0.05, "max relative proxy scale jitter", type=float)
    o.add("--aug-translate", 0.05, "max proxy translation jitter", type=float)


def _sample_flags(o: _Options) -> None:
    o.add("--sample-steps", 20, "Euler steps", type=int)
    o.add("--guidance", 1.0, "classifier-free guidance scale", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gorender", description=__doc__.split("\n")[0])
    parser.add_argument("--seed", type=int, default=None, help="global seed (default: 0)")
    parser.add_argument("--config", type=Path, default=None, help="JSON file with option values")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    cm = sub.add_parser("coordmap", help="coordinate-map tools").add_subparsers(dest="action", required=True)
    o = _command(cm, "render", "render coordinate maps of a proxy for a camera file", cmd_coordmap_render)
    o.add("--proxy", help="OBJ or PLY proxy", type=Path, required=True)
    o.add("--cameras", help="camera JSON file", type=Path, required=True)
    o.add("--out", help="output directory", type=Path, required=True)
    o.add("--splat-radius", 1.5, "point-cloud disk radius in pixels", type=float)
    o.add("--preview", False, "also write PNG previews", action="store_true")

    ds = sub.add_parser("dataset", help="synthetic data").add_subparsers(dest="action", required=True)
    o = _command(ds, "generate", "generate a procedural paired dataset", cmd_dataset_generate)
    o.add("--out", help="output directory", type=Path, required=True)
    o.add("--count", 64, "number of samples", type=int)
    o.add("--resolution", 32, "square frame size", type=int)
    o.add("--n-refs", 3, "references per sample", type=int)
    o.add("--n-frames", 5, "target frames per sample", type=int)
    o.add("--trajectory", "mixed", "target camera path", choices=["orbit", "dolly", "mixed"])

    o = _command(sub, "train", "train a model on a dataset directory", cmd_train)
    o.add("--data", help="dataset directory", type=Path, required=True)
    o.add("--out", help="checkpoint path (writes .gort and .json)", type=Path, required=True)
    o.add("--limit", None, "use only the first K samples", type=int)
    _model_flags(o)
    _train_flags(o)
    o.add("--log-every", 100, "progress interval in steps", type=int)

    o = _command(sub, "sample", "generate frames for dataset samples", cmd_sample)
    o.add("--checkpoint", help="checkpoint path", type=Path, required=True)
    o.add("--data", help="dataset directory", type=Path, required=True)
    o.add("--out", help="output directory", type=Path, required=True)
    o.add("--index", None, "sample indices to render (default: all)", type=int, nargs="+")
    _sample_flags(o)

    o = _command(sub, "eval", "PSNR/SSIM of sampled frames against a dataset", cmd_eval)
    o.add("--checkpoint", help="checkpoint path", type=Path, required=True)
    o.add("--data", help="dataset directory", type=Path, required=True)
    o.add("--limit", None, "use only the first K samples", type=int)
    o.add("--foreground-only", False, "mask metrics by coordinate-map validity", action="store_true")
    o.add("--min-psnr", None, "exit 3 when mean PSNR falls below this", type=float)
    o.add("--format", "json", "report format", choices=["json", "csv"])
    _sample_flags(o)

    rope = sub.add_parser("rope", help="rotary-embedding tools").add_subparsers(dest="action", required=True)
    o = _command(rope, "dump", "print temporal indices and phases as JSON", cmd_rope_dump)
    o.add("--n", help="number of references", type=int, required=True)
    o.add("--m", help="number of target frames", type=int, required=True)
    o.add("--g", 3, "temporal gap", type=int)
    o.add("--head-dim", 16, "per-head width", type=int)
    o.add("--phases", False, "include t-axis phases per index", action="store_true")

    ab = sub.add_parser("ablate", help="ablation runs").add_subparsers(dest="action", required=True)
    o = _command(ab, "g", "train one model per temporal gap and tabulate", cmd_ablate_g)
    o.add("--data", help="dataset directory", type=Path, required=True)
    o.add("--gaps", [0, 1, 3, 5, 10], "gap values", type=int, nargs="+")
    o.add("--limit", None, "use only the first K samples", type=int)
    o.add("--out", None, "write the table here (.csv or .json)", type=Path)
    _model_flags(o)
    _train_flags(o)
    _sample_flags(o)
    o = _command(ab, "perturb", "sweep target coordinate-map noise at inference", cmd_ablate_perturb)
    o.add("--checkpoint", help="checkpoint path", type=Path, required=True)
    o.add("--data", help="dataset directory", type=Path, required=True)
    o.add("--sigmas", [0.0, 0.05, 0.1, 0.2, 0.4], "noise levels", type=float, nargs="+")
    o.add("--limit", None, "use only the first K samples", type=int)
    o.add("--out", None, "write the table here (.csv or .json)", type=Path)
    _sample_flags(o)

    o = _command(sub, "run", "render target frames from references, a proxy and a trajectory", cmd_run)
    o.add("--refs", help="reference images (PNG or .gort H x W x 3)", type=Path, nargs="+", required=True)
    o.add("--ref-cameras", help="camera JSON, one entry per reference", type=Path, required=True)
    o.add("--proxy", help="OBJ or PLY proxy", type=Path, required=True)
    o.add("--trajectory", help="camera JSON for the target frames", type=Path, required=True)
    o.add("--appearance", None, "optional per-frame appearance images", type=Path, nargs="+")
    o.add("--ground-truth", None, "optional true target frames for a report", type=Path, nargs="+")
    o.add("--checkpoint", None, "checkpoint path (required unless --dry-run)", type=Path)
    o.add("--out", None, "output directory", type=Path)
    o.add("--dry-run", False, "validate inputs and print the token layout", action="store_true")
    o.add("--min-psnr", None, "exit 3 when the report's PSNR falls below this", type=float)
    _sample_flags(o)
    return parser


def _section(args) -> str:
    return args.command if getattr(args, "action", None) is None else f"{args.command}_{args.action}"


def resolve(args, config: dict) -> argparse.Namespace:
    """Fill unset flags from the config file, then from defaults."""
    merged = {k: v for k, v in config.items() if not isinstance(v, dict)}
    merged.update(config.get(_section(args), {}))
    missing = []
    for dest, (default, conv, required) in args.spec.items():
        if getattr(args, dest) is None:
            value = merged.get(dest, default)
            if value is not None and conv is not None and dest in merged:
                value = [conv(v) for v in value] if isinstance(value, list) else conv(value)
            setattr(args, dest, value)
        if required and getattr(args, dest) is None:
            missing.append(dest)
    if args.seed is None:
        args.seed = int(config.get("seed", 0))
    if args.command == "run" and not args.dry_run and args.checkpoint is None:
        missing.append("checkpoint")
    if missing:
        raise InvalidInput("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InvalidInput(f"{path}: config must be a JSON object")
    return data


# -- helpers -------------------------------------------------------------

def _load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".gort":
        arr = tensorio.load(path)
    else:
        try:
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise InvalidInput(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInput(f"{path}: expected H x W x 3, got {arr.shape}")
    return arr.astype(np.float32)


def _save_png(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray((np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8), "RGB").save(path)


def _render_proxy(proxy, frame, camera, radius) -> CoordinateMap:
    if isinstance(proxy, PointCloud):
        return splat_points(proxy, frame, camera, radius)
    return rasterize_mesh(proxy, frame, camera)


def _model_config(args):
    from .minidiffusion import DiTConfig
    return DiTConfig(dim=args.dim, depth=args.depth, heads=args.heads, patch=args.patch, gap=args.gap)


def _train_config(args):
    from .minidiffusion import TrainConfig
    names = {f.name for f in fields(TrainConfig)}
    values = {k: getattr(args, k) for k in names if hasattr(args, k) and getattr(args, k) is not None}
    values["seed"] = args.seed
    return TrainConfig(**values)


def _dataset(args):
    from .synthdata import read_dataset
    data = read_dataset(args.data)
    limit = getattr(args, "limit", None)
    return data[:limit] if limit else data


def _load_model(path: Path):
    from .minidiffusion import MiniDiT
    base = path.with_suffix("") if path.suffix in (".gort", ".json") else path
    for suffix in (".gort", ".json"):
        if not base.with_suffix(suffix).exists():
            raise FileNotFoundError(f"checkpoint file not found: {base.with_suffix(suffix)}")
    return MiniDiT.load(base)


def _write_table(table, path: Path | None, fmt: str = "csv") -> None:
    if path is not None:
        text = table.to_json() if path.suffix == ".json" else table.to_csv()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    print(table.to_json() if fmt == "json" else table.to_csv(), end="" if fmt == "csv" else "\n")


# -- commands ------------------------------------------------------------

def cmd_coordmap_render(args) -> int:
    proxy = load_proxy(args.proxy)
    frame = normalize_object(proxy)
    cams = load_cameras(args.cameras)
    args.out.mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(cams):
        cmap = _render_proxy(proxy, frame, cam, args.splat_radius)
        cmap.save(args.out / f"coordmap_{k:03d}.gort")
        if args.preview:
            cmap.save_preview(args.out / f"coordmap_{k:03d}.png")
    print(json.dumps({"frames": len(cams), "center": frame.center.tolist(), "half_extent": frame.half_extent}))
    return EXIT_OK


def cmd_dataset_generate(args) -> int:
    from .synthdata import DatasetConfig, generate_dataset, write_dataset
    cfg = DatasetConfig(args.count, args.resolution, args.n_refs, args.n_frames, args.trajectory, args.seed)
    samples = generate_dataset(cfg)
    write_dataset(samples, args.out, cfg.__dict__)
    print(json.dumps({"out": str(args.out), "count": len(samples)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .minidiffusion import MiniDiT, evaluation_loss, train
    data = _dataset(args)
    model = MiniDiT(_model_config(args), seed=args.seed)
    tcfg = _train_config(args)
    before = evaluation_loss(model, data, seed=args.seed)

    def progress(step, value):
        if args.log_every and step % args.log_every == 0:
            log.info("step %d loss %.5f", step, value)

    result = train(model, data, tcfg, progress)
    after = evaluation_loss(model, data, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    base = args.out.with_suffix("") if args.out.suffix in (".gort", ".json") else args.out
    Path(str(base) + ".losses.json").write_text(json.dumps(result.losses))
    print(json.dumps({"checkpoint": str(base), "initial_loss": before, "final_loss": after,
                      "seconds": round(result.seconds, 2)}))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .minidiffusion import sample_for
    model = _load_model(args.checkpoint)
    data = _dataset(args)
    indices = args.index if args.index else range(len(data))
    args.out.mkdir(parents=True, exist_ok=True)
    for i in indices:
        if not 0 <= i < len(data):
            raise InvalidInput(f"sample index {i} out of range (dataset holds {len(data)})")
        frames = sample_for(model, data[i], args.sample_steps, args.guidance, args.seed + i)
        tensorio.save(args.out / f"sample_{i:05d}_frames.gort", frames)
        for k, f in enumerate(frames):
            _save_png(args.out / f"sample_{i:05d}_frame_{k:03d}.png", f)
    print(json.dumps({"out": str(args.out), "samples": len(list(indices))}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalharness import evaluate
    model = _load_model(args.checkpoint)
    p, s = evaluate(model, _dataset(args), steps=args.sample_steps, guidance=args.guidance, seed=args.seed,
                    foreground_only=args.foreground_only)
    if args.format == "csv":
        print(f"psnr,ssim\n{p:.6f},{s:.6f}")
    else:
        print(json.dumps({"psnr": p, "ssim": s}))
    if args.min_psnr is not None and p < args.min_psnr:
        raise ThresholdFailure(f"mean PSNR {p:.3f} below threshold {args.min_psnr}")
    return EXIT_OK


def cmd_rope_dump(args) -> int:
    idx = temporal_indices(args.n, args.m, args.g)
    out = {"n": args.n, "m": args.m, "g": args.g, "length": len(idx), "temporal_indices": idx}
    if args.phases:
        cfg = RopeConfig(args.head_dim)
        pos = np.zeros((len(idx), 3))
        pos[:, 0] = idx
        out["t_phases"] = rope_phases(pos, cfg)[:, : cfg.split[0] // 2].tolist()
    print(json.dumps(out))
    return EXIT_OK


def cmd_ablate_g(args) -> int:
    from .evalharness import g_ablation
    table = g_ablation(_dataset(args), args.gaps, model_config=_model_config(args), train_config=_train_config(args),
                       eval_steps=args.sample_steps, seed=args.seed,
                       progress=lambda r: log.info("g=%g loss %.5f psnr %.3f", r.key, r.loss, r.psnr))
    _write_table(table, args.out)
    return EXIT_OK


def cmd_ablate_perturb(args) -> int:
    from .evalharness import robustness_sweep
    model = _load_model(args.checkpoint)
    table = robustness_sweep(model, _dataset(args), args.sigmas, args.seed, steps=args.sample_steps,
                             guidance=args.guidance)
    _write_table(table, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    from .evalharness import frame_metrics
    if not args.proxy.exists():
        raise FileNotFoundError(f"proxy file not found: {args.proxy}")
    proxy = load_proxy(args.proxy)
    frame = normalize_object(proxy)
    ref_cams = load_cameras(args.ref_cameras)
    tgt_cams = load_cameras(args.trajectory)
    images = [_load_image(p) for p in args.refs]
    if len(images) != len(ref_cams):
        raise InvalidInput(f"{len(images)} reference images but {len(ref_cams)} reference cameras")
    if not 1 <= len(images) <= 8:
        raise InvalidInput("between 1 and 8 references are supported")
    if not tgt_cams:
        raise InvalidInput(f"{args.trajectory}: trajectory holds no cameras")
    h, w = images[0].shape[:2]
    for path, img, cam in zip(args.refs, images, ref_cams):
        if img.shape[:2] != (h, w) or (cam.height, cam.width) != (h, w):
            raise InvalidInput(f"{path}: resolution {img.shape[1]}x{img.shape[0]} does not match "
                               f"camera {cam.width}x{cam.height} / first reference {w}x{h}")
    for k, cam in enumerate(tgt_cams):
        if (cam.height, cam.width) != (h, w):
            raise InvalidInput(f"trajectory camera {k} is {cam.width}x{cam.height}, references are {w}x{h}")

    appearance = None
    if args.appearance:
        appearance = np.stack([_load_image(p) for p in args.appearance])
        if appearance.shape[0] != len(tgt_cams) or appearance.shape[1:3] != (h, w):
            raise InvalidInput("appearance frames must match the trajectory length and resolution")
    truth = None
    if args.ground_truth:
        truth = np.stack([_load_image(p) for p in args.ground_truth])
        if truth.shape[0] != len(tgt_cams) or truth.shape[1:3] != (h, w):
            raise InvalidInput("ground-truth frames must match the trajectory length and resolution")

    model = _load_model(args.checkpoint) if args.checkpoint is not None else None
    patch = model.cfg.patch if model is not None else 2
    gap = model.cfg.gap if model is not None else 3
    if h % patch or w % patch:
        raise InvalidInput(f"resolution {w}x{h} is not divisible by patch size {patch}")
    layout = Layout(len(images), len(tgt_cams), h // patch, w // patch, patch)
    plan = {"n_refs": layout.n_refs, "n_frames": layout.n_frames, "patch": patch, "gap": gap,
            "tokens_per_frame": layout.tokens_per_frame, "n_ref_tokens": layout.n_ref_tokens,
            "n_target_tokens": layout.n_target_tokens, "n_tokens": layout.n_tokens,
            "temporal_indices": temporal_indices(layout.n_refs, layout.n_frames, gap)}
    if args.dry_run:
        print(json.dumps(plan))
        return EXIT_OK
    if args.out is None:
        raise InvalidInput("--out is required unless --dry-run is given")

    from .minidiffusion import sample
    radius = 1.5
    refs = [ReferenceUnit(img, _render_proxy(proxy, frame, cam, radius)) for img, cam in zip(images, ref_cams)]
    maps = [_render_proxy(proxy, frame, cam, radius) for cam in tgt_cams]
    frames = sample(model, refs, maps, appearance, args.sample_steps, args.guidance, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for k, (cmap, f) in enumerate(zip(maps, frames)):
        cmap.save(args.out / f"coordmap_{k:03d}.gort")
        _save_png(args.out / f"frame_{k:03d}.png", f)
    tensorio.save(args.out / "frames.gort", frames)
    report = {"layout": plan, "frames": len(frames)}
    if truth is not None:
        p, s = frame_metrics(frames, truth)
        report.update(psnr=p, ssim=s)
    (args.out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    if truth is not None and args.min_psnr is not None and report["psnr"] < args.min_psnr:
        raise ThresholdFailure(f"PSNR {report['psnr']:.3f} below threshold {args.min_psnr}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        resolve(args, _load_config(args.config))
        return args.func(args)
    except ThresholdFailure as exc:
        print(f"gorender: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except FileNotFoundError as exc:
        print(f"gorender: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvalidInput, DatasetCorrupt, ContainerError) as exc:
        print(f"gorender: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"gorender: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
