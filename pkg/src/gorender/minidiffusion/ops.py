"""Forward/backward pairs for the transformer's building blocks.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache. Shapes are documented where not obvious.
"""
from __future__ import annotations

import math

import numpy as np

from ..rope3d import rotate_pairs

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dout, x, w):
    """Returns (dx, dw, db)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def layernorm_fwd(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def layernorm_bwd(dxhat, cache):
    xhat, inv = cache
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(dout, cache):
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def gelu_fwd(x):
    """tanh approximation."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_bwd(dout, cache):
    x, th = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def modulate_fwd(xn, shift, scale, n_ref):
    """Group-wise ``xn * (1 + scale[g]) + shift[g]``; rows < n_ref use group 0.

    ``shift`` and ``scale`` are (2, d): row 0 for references, row 1 for targets.
    """
    out = np.empty_like(xn)
    out[:n_ref] = xn[:n_ref] * (1.0 + scale[0]) + shift[0]
    out[n_ref:] = xn[n_ref:] * (1.0 + scale[1]) + shift[1]
    return out, (xn, scale, n_ref)


def modulate_bwd(dout, cache):
    xn, scale, n_ref = cache
    dxn = np.empty_like(dout)
    dxn[:n_ref] = dout[:n_ref] * (1.0 + scale[0])
    dxn[n_ref:] = dout[n_ref:] * (1.0 + scale[1])
    dscale = np.stack([(dout[:n_ref] * xn[:n_ref]).sum(0), (dout[n_ref:] * xn[n_ref:]).sum(0)])
    dshift = np.stack([dout[:n_ref].sum(0), dout[n_ref:].sum(0)])
    return dxn, dshift, dscale


def gate_fwd(y, gate, n_ref):
    out = np.empty_like(y)
    out[:n_ref] = y[:n_ref] * gate[0]
    out[n_ref:] = y[n_ref:] * gate[1]
    return out, (y, gate, n_ref)


def gate_bwd(dout, cache):
    y, gate, n_ref = cache
    dy = np.empty_like(dout)
    dy[:n_ref] = dout[:n_ref] * gate[0]
    dy[n_ref:] = dout[n_ref:] * gate[1]
    dgate = np.stack([(dout[:n_ref] * y[:n_ref]).sum(0), (dout[n_ref:] * y[n_ref:]).sum(0)])
    return dy, dgate


def attention_fwd(qkv, heads, cos, sin):
    """Full self-attention with rotary q/k.

    qkv: (L, 3d); cos/sin: (L, head_dim / 2). Returns (L, d).
    """
    n, three_d = qkv.shape
    d = three_d // 3
    hd = d // heads
    q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, heads, hd).transpose(1, 0, 2) for i in range(3))
    qr = rotate_pairs(q, cos, sin)
    kr = rotate_pairs(k, cos, sin)
    scale = 1.0 / math.sqrt(hd)
    s = (qr @ kr.transpose(0, 2, 1)) * scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    o = s @ v
    out = o.transpose(1, 0, 2).reshape(n, d)
    return out, (qr, kr, v, s, cos, sin, scale)


def attention_bwd(dout, cache):
    qr, kr, v, p, cos, sin, scale = cache
    heads, n, hd = v.shape
    do = dout.reshape(n, heads, hd).transpose(1, 0, 2)
    dv = p.transpose(0, 2, 1) @ do
    dp = do @ v.transpose(0, 2, 1)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds *= scale
    dqr = ds @ kr
    dkr = ds.transpose(0, 2, 1) @ qr
    dq = rotate_pairs(dqr, cos, -sin)
    dk = rotate_pairs(dkr, cos, -sin)
    return np.concatenate([g.transpose(1, 0, 2).reshape(n, heads * hd) for g in (dq, dk, dv)], axis=1)


def attention_logits(qkv, heads, cos, sin):
    """Pre-softmax scores (heads, L, L), for instrumentation."""
    n, three_d = qkv.shape
    d = three_d // 3
    hd = d // heads
    q, k = (qkv[:, i * d:(i + 1) * d].reshape(n, heads, hd).transpose(1, 0, 2) for i in range(2))
    return (rotate_pairs(q, cos, sin) @ rotate_pairs(k, cos, sin).transpose(0, 2, 1)) / math.sqrt(hd)


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features of ``1000 * t``; rows follow the entries of ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
