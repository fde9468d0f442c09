"""MiniDiT: a small diffusion transformer over joint reference/target tokens.

Every block is pre-norm self-attention plus an MLP, with timestep-driven
shift/scale/gate modulation. Reference tokens are modulated as if t = 0.
Attention spans the whole sequence and is position-aware only through 3D
rope. Gradients are computed by hand (see ``backward``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import tensorio
from ..conditioning import LATENT_CHANNELS, REF_CHANNELS, REF_COORDS, ConditioningSequence, target_slices
from ..errors import InvalidInput
from ..rng import gaussian, make_rng
from ..rope3d import DEFAULT_GAP, RopeConfig, rope_phases
from . import ops


@dataclass(frozen=True)
class DiTConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 2
    channels: int = LATENT_CHANNELS
    freq_dim: int = 64
    rope_theta: float = 10000.0
    rope_split: tuple[int, int, int] | None = None
    gap: int = DEFAULT_GAP

    def __post_init__(self):
        if self.dim % self.heads:
            raise InvalidInput("dim must be divisible by heads")
        split = None if self.rope_split is None else tuple(self.rope_split)
        object.__setattr__(self, "rope_split", split)
        # resolve the default split so saved configs compare equal to fresh ones
        object.__setattr__(self, "rope_split", self.rope.split)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_split, self.rope_theta)

    @property
    def ref_in(self) -> int:
        return REF_CHANNELS * self.patch ** 2

    @property
    def target_in(self) -> int:
        return (self.channels + 8) * self.patch ** 2

    @property
    def out_dim(self) -> int:
        return self.channels * self.patch ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_split"] = list(self.rope_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: (tuple(v) if k == "rope_split" and v is not None else v) for k, v in d.items() if k in known})


def param_spec(cfg: DiTConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.dim, cfg.freq_dim
    spec = [
        ("ref_in.w", (cfg.ref_in, d)), ("ref_in.b", (d,)),
        ("target_in.w", (cfg.target_in, d)), ("target_in.b", (d,)),
        ("null_ref", (d,)), ("null_text", (d,)),
        ("t_mlp1.w", (f, d)), ("t_mlp1.b", (d,)),
        ("t_mlp2.w", (d, d)), ("t_mlp2.b", (d,)),
    ]
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        spec += [
            (f"blocks.{i}.ada.w", (d, 6 * d)), (f"blocks.{i}.ada.b", (6 * d,)),
            (f"blocks.{i}.qkv.w", (d, 3 * d)), (f"blocks.{i}.qkv.b", (3 * d,)),
            (f"blocks.{i}.proj.w", (d, d)), (f"blocks.{i}.proj.b", (d,)),
            (f"blocks.{i}.fc1.w", (d, hidden)), (f"blocks.{i}.fc1.b", (hidden,)),
            (f"blocks.{i}.fc2.w", (hidden, d)), (f"blocks.{i}.fc2.b", (d,)),
        ]
    spec += [("final_ada.w", (d, 2 * d)), ("final_ada.b", (2 * d,)),
             ("out.w", (d, cfg.out_dim)), ("out.b", (cfg.out_dim,))]
    return spec


class ParamStore:
    """Named views into one flat parameter vector."""

    def __init__(self, spec, dtype=np.float32, flat: np.ndarray | None = None):
        self.spec = [(name, tuple(shape)) for name, shape in spec]
        self.offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in self.spec:
            n = int(np.prod(shape))
            self.offsets[name] = (pos, pos + n, shape)
            pos += n
        self.size = pos
        if flat is None:
            flat = np.zeros(pos, dtype)
        elif flat.shape != (pos,):
            raise InvalidInput(f"flat vector has {flat.size} entries, spec needs {pos}")
        self.flat = flat
        self._views = {name: flat[a:b].reshape(shape) for name, (a, b, shape) in self.offsets.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def names(self) -> list[str]:
        return [name for name, _ in self.spec]

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.spec, self.flat.dtype)

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, flat=self.flat.copy())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.spec, flat=self.flat.astype(dtype))


@dataclass
class ForwardCache:
    n_ref: int
    dropped: bool
    ref_tokens: np.ndarray
    target_tokens: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    temb: tuple
    blocks: list = field(default_factory=list)
    final: tuple = ()
    logits: list = field(default_factory=list)


class MiniDiT:
    def __init__(self, cfg: DiTConfig | None = None, seed: int = 0, dtype=np.float32,
                 params: ParamStore | None = None):
        self.cfg = cfg or DiTConfig()
        self.params = params if params is not None else self.init_params(seed, dtype)

    @property
    def dtype(self):
        return self.params.flat.dtype

    def init_params(self, seed: int, dtype=np.float32, zero_modulation: bool = True) -> ParamStore:
        """Xavier-normal weights, zero biases.

        Modulation and output layers start at zero so the network is the
        identity-plus-zero-velocity map at step 0; coordinate-map columns of
        both input projections also start at zero.
        """
        cfg = self.cfg
        store = ParamStore(param_spec(cfg), dtype)
        rng = make_rng(seed, 0x1417)
        for name, shape in store.spec:
            if len(shape) == 2:
                std = np.sqrt(2.0 / (shape[0] + shape[1]))
                store[name][...] = gaussian(rng, shape) * std
        store["null_ref"][...] = gaussian(rng, (cfg.dim,)) * 0.02
        store["null_text"][...] = gaussian(rng, (cfg.dim,)) * 0.02
        if zero_modulation:
            for name in store.names():
                if ".ada." in name or name.startswith(("final_ada", "out.")):
                    store[name][...] = 0.0
        p = cfg.patch ** 2
        ref_rows = np.arange(cfg.ref_in).reshape(p, REF_CHANNELS)[:, REF_COORDS].ravel()
        tgt_coords = target_slices(cfg.channels)["coords"]
        tgt_rows = np.arange(cfg.target_in).reshape(p, cfg.channels + 8)[:, tgt_coords].ravel()
        store["ref_in.w"][ref_rows] = 0.0
        store["target_in.w"][tgt_rows] = 0.0
        return store

    def randomize(self, seed: int, scale: float = 0.3) -> None:
        """Fill every parameter with noise; used by gradient checks."""
        rng = make_rng(seed, 0xF00D)
        self.params.flat[...] = gaussian(rng, (self.params.size,)) * scale

    # -- forward ---------------------------------------------------------

    def _timestep(self, t: float):
        p = self.params
        feats = ops.timestep_embedding([0.0, t], self.cfg.freq_dim).astype(self.dtype)
        h1, _ = ops.linear_fwd(feats, p["t_mlp1.w"], p["t_mlp1.b"])
        a1, c_silu1 = ops.silu_fwd(h1)
        c, _ = ops.linear_fwd(a1, p["t_mlp2.w"], p["t_mlp2.b"])
        c = c + p["null_text"]
        sc, c_silu2 = ops.silu_fwd(c)
        return sc, (feats, a1, c_silu1, c_silu2)

    def forward(self, seq: ConditioningSequence, t: float, drop_refs: bool = False,
                keep_logits: bool = False) -> tuple[np.ndarray, ForwardCache]:
        """Velocity prediction for the target tokens: (n_target_tokens, C_x p^2)."""
        cfg, p = self.cfg, self.params
        dt = self.dtype
        if not 0.0 <= t <= 1.0:
            raise InvalidInput("t must lie in [0, 1]")
        ref_tok = seq.ref_tokens.astype(dt, copy=False)
        tgt_tok = seq.target_tokens.astype(dt, copy=False)
        n_ref = ref_tok.shape[0]
        phases = rope_phases(seq.positions, cfg.rope)
        cos, sin = np.cos(phases).astype(dt), np.sin(phases).astype(dt)
        cos, sin = cos[None], sin[None]

        sc, temb_cache = self._timestep(t)
        xt, _ = ops.linear_fwd(tgt_tok, p["target_in.w"], p["target_in.b"])
        if drop_refs:
            xr = np.broadcast_to(p["null_ref"], (n_ref, cfg.dim))
        else:
            xr, _ = ops.linear_fwd(ref_tok, p["ref_in.w"], p["ref_in.b"])
        x = np.concatenate([xr, xt]).astype(dt, copy=False)

        cache = ForwardCache(n_ref, drop_refs, ref_tok, tgt_tok, cos, sin, (sc, temb_cache))
        d = cfg.dim
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            mod = sc @ p[pre + "ada.w"] + p[pre + "ada.b"]
            sh1, sc1, g1, sh2, sc2, g2 = (mod[:, j * d:(j + 1) * d] for j in range(6))
            xn1, ln1 = ops.layernorm_fwd(x)
            h1, m1 = ops.modulate_fwd(xn1, sh1, sc1, n_ref)
            qkv, _ = ops.linear_fwd(h1, p[pre + "qkv.w"], p[pre + "qkv.b"])
            if keep_logits:
                cache.logits.append(ops.attention_logits(qkv, cfg.heads, cos, sin))
            att, att_c = ops.attention_fwd(qkv, cfg.heads, cos, sin)
            o, _ = ops.linear_fwd(att, p[pre + "proj.w"], p[pre + "proj.b"])
            go, gt1 = ops.gate_fwd(o, g1, n_ref)
            x = x + go
            xn2, ln2 = ops.layernorm_fwd(x)
            h2, m2 = ops.modulate_fwd(xn2, sh2, sc2, n_ref)
            f1, _ = ops.linear_fwd(h2, p[pre + "fc1.w"], p[pre + "fc1.b"])
            a, gel = ops.gelu_fwd(f1)
            f2, _ = ops.linear_fwd(a, p[pre + "fc2.w"], p[pre + "fc2.b"])
            gf, gt2 = ops.gate_fwd(f2, g2, n_ref)
            x = x + gf
            cache.blocks.append((ln1, m1, h1, qkv, att_c, att, gt1, ln2, m2, h2, f1, gel, a, gt2))

        fmod = sc @ p["final_ada.w"] + p["final_ada.b"]
        xn, lnf = ops.layernorm_fwd(x)
        y, mf = ops.modulate_fwd(xn, fmod[:, :d], fmod[:, d:], n_ref)
        yt = y[n_ref:]
        out, _ = ops.linear_fwd(yt, p["out.w"], p["out.b"])
        cache.final = (lnf, mf, yt)
        return out, cache

    # -- backward --------------------------------------------------------

    def backward(self, dout: np.ndarray, cache: ForwardCache) -> ParamStore:
        """Gradients of a scalar w.r.t. every parameter, given d scalar / d output."""
        cfg, p = self.cfg, self.params
        g = self.params.zeros_like()
        d = cfg.dim
        n_ref = cache.n_ref
        sc, (feats, a1, c_silu1, c_silu2) = cache.temb
        dsc = np.zeros_like(sc)

        lnf, mf, yt = cache.final
        dyt, g["out.w"][...], g["out.b"][...] = ops.linear_bwd(dout.astype(self.dtype), yt, p["out.w"])
        dy = np.zeros((n_ref + dyt.shape[0], d), self.dtype)
        dy[n_ref:] = dyt
        dxn, dshift, dscale = ops.modulate_bwd(dy, mf)
        dfmod = np.concatenate([dshift, dscale], axis=1)
        g["final_ada.w"][...] = sc.T @ dfmod
        g["final_ada.b"][...] = dfmod.sum(0)
        dsc += dfmod @ p["final_ada.w"].T
        dx = ops.layernorm_bwd(dxn, lnf)

        for i in reversed(range(cfg.depth)):
            pre = f"blocks.{i}."
            ln1, m1, h1, qkv, att_c, att, gt1, ln2, m2, h2, f1, gel, a, gt2 = cache.blocks[i]
            dmod = np.zeros((2, 6 * d), self.dtype)
            # MLP branch
            df2, dmod[:, 5 * d:] = ops.gate_bwd(dx, gt2)
            da, g[pre + "fc2.w"][...], g[pre + "fc2.b"][...] = ops.linear_bwd(df2, a, p[pre + "fc2.w"])
            df1 = ops.gelu_bwd(da, gel)
            dh2, g[pre + "fc1.w"][...], g[pre + "fc1.b"][...] = ops.linear_bwd(df1, h2, p[pre + "fc1.w"])
            dxn2, dmod[:, 3 * d:4 * d], dmod[:, 4 * d:5 * d] = ops.modulate_bwd(dh2, m2)
            dx = dx + ops.layernorm_bwd(dxn2, ln2)
            # attention branch
            do, dmod[:, 2 * d:3 * d] = ops.gate_bwd(dx, gt1)
            datt, g[pre + "proj.w"][...], g[pre + "proj.b"][...] = ops.linear_bwd(do, att, p[pre + "proj.w"])
            dqkv = ops.attention_bwd(datt, att_c)
            dh1, g[pre + "qkv.w"][...], g[pre + "qkv.b"][...] = ops.linear_bwd(dqkv, h1, p[pre + "qkv.w"])
            dxn1, dmod[:, :d], dmod[:, d:2 * d] = ops.modulate_bwd(dh1, m1)
            dx = dx + ops.layernorm_bwd(dxn1, ln1)
            g[pre + "ada.w"][...] = sc.T @ dmod
            g[pre + "ada.b"][...] = dmod.sum(0)
            dsc += dmod @ p[pre + "ada.w"].T

        dxr, dxt = dx[:n_ref], dx[n_ref:]
        _, g["target_in.w"][...], g["target_in.b"][...] = ops.linear_bwd(dxt, cache.target_tokens, p["target_in.w"])
        if cache.dropped:
            g["null_ref"][...] = dxr.sum(0)
        elif n_ref:
            _, g["ref_in.w"][...], g["ref_in.b"][...] = ops.linear_bwd(dxr, cache.ref_tokens, p["ref_in.w"])

        dc = ops.silu_bwd(dsc, c_silu2)
        g["null_text"][...] = dc.sum(0)
        da1, g["t_mlp2.w"][...], g["t_mlp2.b"][...] = ops.linear_bwd(dc, a1, p["t_mlp2.w"])
        dh1 = ops.silu_bwd(da1, c_silu1)
        _, g["t_mlp1.w"][...], g["t_mlp1.b"][...] = ops.linear_bwd(dh1, feats, p["t_mlp1.w"])
        return g

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        """``<path>.gort`` holds the flat parameters, ``<path>.json`` config and segments."""
        base = _strip(path)
        tensorio.save(base.with_suffix(".gort"), self.params.flat)
        meta = {"config": self.cfg.to_dict(),
                "segments": [{"name": n, "offset": a, "shape": list(s)} for n, (a, _, s) in self.params.offsets.items()]}
        base.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "MiniDiT":
        base = _strip(path)
        try:
            meta = json.loads(base.with_suffix(".json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read checkpoint config {base.with_suffix('.json')}: {exc}") from exc
        cfg = DiTConfig.from_dict(meta["config"])
        flat = tensorio.load(base.with_suffix(".gort")).astype(dtype)
        spec = param_spec(cfg)
        stored = [(s["name"], tuple(s["shape"])) for s in meta.get("segments", [])]
        if stored and stored != [(n, tuple(sh)) for n, sh in spec]:
            raise InvalidInput("checkpoint segments do not match its config")
        if flat.ndim != 1:
            raise InvalidInput("checkpoint tensor must be one-dimensional")
        return cls(cfg, params=ParamStore(spec, flat=flat))


def _strip(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".gort", ".json") else path
