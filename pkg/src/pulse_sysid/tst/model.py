"""Patch transformer with future-current fusion, in plain numpy.

The forward pass keeps every intermediate needed by :func:`backward`, which
differentiates the mean-squared-error loss by hand. All arithmetic is
float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TstError(RuntimeError):
    pass


@dataclass(frozen=True)
class TstConfig:
    context_len: int = 128
    horizon: int = 16
    patch_len: int = 8
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    dropout: float = 0.1
    in_channels: int = 2

    def __post_init__(self):
        for k in ("context_len", "horizon", "patch_len", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.context_len % self.patch_len:
            raise ValueError("patch_len must divide context_len")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.in_channels != 2:
            raise ValueError("the model takes exactly 2 input channels")

    @property
    def n_patches(self) -> int:
        return self.context_len // self.patch_len

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def reference(cls) -> "TstConfig":
        """Full-size reference configuration (about 3.3 M parameters)."""
        return cls(context_len=1024, horizon=64, patch_len=16, d_model=256, n_heads=8,
                   n_layers=4, d_ff=1024, dropout=0.1)


def param_shapes(cfg: TstConfig) -> dict:
    d, f, H, N, P = cfg.d_model, cfg.d_ff, cfg.horizon, cfg.n_patches, cfg.patch_len
    shapes = {"emb.W": (2 * P, d), "emb.b": (d,), "pos": (N, d)}
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "Wq": (d, d), p + "bq": (d,), p + "Wk": (d, d), p + "bk": (d,),
            p + "Wv": (d, d), p + "bv": (d,), p + "Wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "W1": (d, f), p + "b1": (f,), p + "W2": (f, d), p + "b2": (d,),
        })
    shapes.update({
        "lnf.g": (d,), "lnf.b": (d,),
        "fut.W": (H, d), "fut.b": (d,),
        "fuse.W": (2 * d, d), "fuse.b": (d,),
        "head.W": (d, H), "head.b": (H,),
    })
    return shapes


class TstModel:
    """Config plus a flat ``name -> ndarray`` parameter dict."""

    def __init__(self, cfg: TstConfig, params: dict):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            raise TstError("parameter names do not match the configuration")
        for k, shp in shapes.items():
            if params[k].shape != shp:
                raise TstError(f"{k}: shape {params[k].shape}, expected {shp}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: TstConfig, seed: int = 0) -> "TstModel":
        rng = np.random.default_rng(seed)
        params = {}
        for k, shp in param_shapes(cfg).items():
            leaf = k.rsplit(".", 1)[-1]
            if k == "pos":
                params[k] = rng.normal(0.0, 0.02, shp)
            elif leaf.startswith("W"):
                bound = 1.0 / math.sqrt(shp[0])
                params[k] = rng.uniform(-bound, bound, shp)
            elif leaf == "g":
                params[k] = np.ones(shp)
            else:
                params[k] = np.zeros(shp)
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: TstConfig) -> "TstModel":
        return cls(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})

    def copy(self) -> "TstModel":
        return TstModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def save(self, path, extra: dict | None = None):
        from ..checkpoint import save_arrays

        header = {"kind": "tst", "config": self.cfg.to_dict(), **(extra or {})}
        return save_arrays(path, header, self.params)

    @classmethod
    def load(cls, path) -> tuple:
        """Returns ``(model, header)``."""
        from ..checkpoint import load_arrays

        header, arrays = load_arrays(path)
        if header.get("kind") != "tst":
            raise TstError(f"{path} is not a transformer checkpoint")
        return cls(TstConfig(**header["config"]), arrays), header


def param_count(model_or_cfg) -> int:
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, TstModel) else model_or_cfg
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


# -- building blocks ---------------------------------------------------------


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _sum0(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _matgrad(x, dy):
    """Weight gradient for ``y = x @ W`` over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def patchify(context, patch_len: int):
    """(B, L, 2) -> (B, N, 2P); each patch holds P time steps of both channels."""
    B, L, C = context.shape
    return context.reshape(B, L // patch_len, patch_len * C)


def unpatchify(patches, patch_len: int):
    B, N, F = patches.shape
    return patches.reshape(B, N * patch_len, F // patch_len)


class _Dropout:
    """Inverted dropout masks drawn in a fixed order from one seeded stream."""

    def __init__(self, rate: float, training: bool, seed):
        self.rate = rate
        self.on = training and rate > 0
        self.rng = np.random.default_rng(seed) if self.on else None

    def mask(self, shape):
        if not self.on:
            return None
        return (self.rng.random(shape) >= self.rate) / (1.0 - self.rate)


def _apply(x, mask):
    return x if mask is None else x * mask


def _check(name, x):
    if not np.all(np.isfinite(x)):
        raise TstError(f"non-finite activations in {name}")
    return x


# -- forward / backward ------------------------------------------------------


def forward(model: TstModel, context, future_current, training: bool = False, seed=0,
            return_cache: bool = False):
    """Predict the normalized H-step residual; shapes (B, L, 2), (B, H) -> (B, H)."""
    cfg, p = model.cfg, model.params
    context = np.asarray(context, dtype=float)
    c_fut = np.asarray(future_current, dtype=float)
    if context.ndim != 3 or context.shape[1:] != (cfg.context_len, 2):
        raise TstError(f"context shape {context.shape}, expected (B, {cfg.context_len}, 2)")
    B = context.shape[0]
    if c_fut.shape != (B, cfg.horizon):
        raise TstError(f"future current shape {c_fut.shape}, expected ({B}, {cfg.horizon})")
    drop = _Dropout(cfg.dropout, training, seed)
    N, d, h, dk = cfg.n_patches, cfg.d_model, cfg.n_heads, cfg.d_k
    scale = 1.0 / math.sqrt(dk)

    xp = patchify(context, cfg.patch_len)
    m_emb = drop.mask((B, N, d))
    z = _apply(xp @ p["emb.W"] + p["emb.b"] + p["pos"], m_emb)
    _check("patch embedding", z)
    layers = []
    for l in range(cfg.n_layers):
        q = f"layer{l}."
        a_in, ln1 = _ln_fwd(z, p[q + "ln1.g"], p[q + "ln1.b"])
        Q = (a_in @ p[q + "Wq"] + p[q + "bq"]).reshape(B, N, h, dk).transpose(0, 2, 1, 3)
        K = (a_in @ p[q + "Wk"] + p[q + "bk"]).reshape(B, N, h, dk).transpose(0, 2, 1, 3)
        V = (a_in @ p[q + "Wv"] + p[q + "bv"]).reshape(B, N, h, dk).transpose(0, 2, 1, 3)
        att = softmax((Q @ K.transpose(0, 1, 3, 2)) * scale)
        ctx = (att @ V).transpose(0, 2, 1, 3).reshape(B, N, d)
        m_att = drop.mask((B, N, d))
        z = z + _apply(ctx @ p[q + "Wo"] + p[q + "bo"], m_att)
        _check(f"layer {l} attention", z)
        f_in, ln2 = _ln_fwd(z, p[q + "ln2.g"], p[q + "ln2.b"])
        pre1 = f_in @ p[q + "W1"] + p[q + "b1"]
        act1 = gelu(pre1)
        m_ffn = drop.mask((B, N, d))
        z = z + _apply(act1 @ p[q + "W2"] + p[q + "b2"], m_ffn)
        _check(f"layer {l} feed-forward", z)
        layers.append((a_in, ln1, Q, K, V, att, ctx, m_att, f_in, ln2, pre1, act1, m_ffn))
    zf, lnf = _ln_fwd(z, p["lnf.g"], p["lnf.b"])
    r_ctx = zf[:, -1, :]
    pre_fut = c_fut @ p["fut.W"] + p["fut.b"]
    m_fut = drop.mask((B, d))
    r_fut = _apply(gelu(pre_fut), m_fut)
    cat = np.concatenate([r_ctx, r_fut], axis=1)
    pre_fuse = cat @ p["fuse.W"] + p["fuse.b"]
    m_fuse = drop.mask((B, d))
    r_fused = _apply(gelu(pre_fuse), m_fuse)
    out = _check("head", r_fused @ p["head.W"] + p["head.b"])
    if not return_cache:
        return out
    cache = dict(xp=xp, m_emb=m_emb, layers=layers, lnf=lnf, N=N, c_fut=c_fut, pre_fut=pre_fut,
                 m_fut=m_fut, cat=cat, pre_fuse=pre_fuse, m_fuse=m_fuse, r_fused=r_fused)
    return out, cache


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise TstError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


loss = mse


def backward(model: TstModel, cache: dict, dout) -> dict:
    """Gradients of a scalar loss given ``dout = dL/d(output)``."""
    cfg, p = model.cfg, model.params
    B = dout.shape[0]
    N, d, h, dk = cache["N"], cfg.d_model, cfg.n_heads, cfg.d_k
    scale = 1.0 / math.sqrt(dk)
    g = {}

    g["head.W"] = cache["r_fused"].T @ dout
    g["head.b"] = dout.sum(axis=0)
    dr = _apply(dout @ p["head.W"].T, cache["m_fuse"]) * gelu_grad(cache["pre_fuse"])
    g["fuse.W"] = cache["cat"].T @ dr
    g["fuse.b"] = dr.sum(axis=0)
    dcat = dr @ p["fuse.W"].T
    dr_ctx, dr_fut = dcat[:, :d], dcat[:, d:]
    dpre_fut = _apply(dr_fut, cache["m_fut"]) * gelu_grad(cache["pre_fut"])
    g["fut.W"] = cache["c_fut"].T @ dpre_fut
    g["fut.b"] = dpre_fut.sum(axis=0)

    dzf = np.zeros((B, N, d))
    dzf[:, -1, :] = dr_ctx
    dz, g["lnf.g"], g["lnf.b"] = _ln_bwd(dzf, cache["lnf"])

    for l in reversed(range(cfg.n_layers)):
        q = f"layer{l}."
        a_in, ln1, Q, K, V, att, ctx, m_att, f_in, ln2, pre1, act1, m_ffn = cache["layers"][l]
        # feed-forward branch
        dy = _apply(dz, m_ffn)
        g[q + "W2"] = _matgrad(act1, dy)
        g[q + "b2"] = _sum0(dy)
        dpre1 = (dy @ p[q + "W2"].T) * gelu_grad(pre1)
        g[q + "W1"] = _matgrad(f_in, dpre1)
        g[q + "b1"] = _sum0(dpre1)
        dx, g[q + "ln2.g"], g[q + "ln2.b"] = _ln_bwd(dpre1 @ p[q + "W1"].T, ln2)
        dz = dz + dx
        # attention branch
        dy = _apply(dz, m_att)
        g[q + "Wo"] = _matgrad(ctx, dy)
        g[q + "bo"] = _sum0(dy)
        dctx = (dy @ p[q + "Wo"].T).reshape(B, N, h, dk).transpose(0, 2, 1, 3)
        datt = dctx @ V.transpose(0, 1, 3, 2)
        dV = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dQ = ds @ K
        dK = ds.transpose(0, 1, 3, 2) @ Q
        da = np.zeros((B, N, d))
        for name, dT in (("q", dQ), ("k", dK), ("v", dV)):
            dflat = dT.transpose(0, 2, 1, 3).reshape(B, N, d)
            g[q + "W" + name] = _matgrad(a_in, dflat)
            g[q + "b" + name] = _sum0(dflat)
            da += dflat @ p[q + "W" + name].T
        dx, g[q + "ln1.g"], g[q + "ln1.b"] = _ln_bwd(da, ln1)
        dz = dz + dx

    demb = _apply(dz, cache["m_emb"])
    g["pos"] = demb.sum(axis=0)
    g["emb.W"] = _matgrad(cache["xp"], demb)
    g["emb.b"] = _sum0(demb)
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise TstError(f"non-finite gradient for {k}")
    return g


def loss_and_grad(model: TstModel, context, future_current, target, training: bool = False, seed=0):
    """MSE loss and its exact gradient for every parameter."""
    pred, cache = forward(model, context, future_current, training, seed, return_cache=True)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise TstError(f"target shape {target.shape}, expected {pred.shape}")
    diff = pred - target
    dout = 2.0 * diff / diff.size
    return float(np.mean(diff**2)), backward(model, cache, dout)
