"""Time-conditioned transformer denoiser with hand-written backward pass.

Tokens flow through an input projection plus learned position embeddings,
a stack of pre-norm residual blocks, a final normalization, and an output
projection. Each block applies two sublayers (multi-head self-attention
and a 4x GELU MLP); before each sublayer the normalized activations are
modulated as xhat * (1 + scale) + shift, where scale and shift come from
a small per-block MLP reading a sinusoidal embedding of t. The
modulation MLPs end in zero-initialized layers, so a fresh model starts
as an unconditioned transformer.

Parameters live in a flat dict of float64 arrays keyed like
"block3.qkv_w". forward returns a cache that backward consumes to
produce exact analytic gradients for every parameter.

For a fixed t the conditioning signal is constant, so the per-block
scales and shifts can be precomputed once (merge_conditioning); the
merged model is a plain transformer and reproduces the conditioned
features exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .kernels import (
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    softmax_bwd,
    softmax_fwd,
)


@dataclass(frozen=True)
class DenoiserConfig:
    token_dim_in: int  # channels of each input token
    token_dim_out: int  # channels of each predicted token
    tokens: int  # tokens per example (patch grid squared)
    width: int = 64
    depth: int = 8
    heads: int = 4
    time_embed_dim: int = 64

    def __post_init__(self):
        if min(self.token_dim_in, self.token_dim_out, self.tokens) < 1:
            raise ValueError("token dims and token count must be positive")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise ValueError(f"width {self.width} must be divisible by 4")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def cond_hidden(self) -> int:
        return self.width // 4


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer times; returns (B, dim), B = 1 for scalars.

    Frequencies decay geometrically from 1 to 1/10000, the usual
    transformer position encoding applied to the diffusion time.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters; draw order is fixed so seeds reproduce exactly.

    Linear weights are Gaussian with std 1/sqrt(fan_in), biases zero,
    position embeddings Gaussian std 0.02. The final layer of every
    conditioning MLP is zero so modulation starts as the identity.
    """
    w, e, hid = config.width, config.time_embed_dim, config.cond_hidden

    def lin(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    p: dict[str, np.ndarray] = {}
    p["in_proj_w"] = lin(config.token_dim_in, w)
    p["in_proj_b"] = np.zeros(w)
    p["pos_embed"] = rng.standard_normal((config.tokens, w)) * 0.02
    for i in range(config.depth):
        p[f"block{i}.qkv_w"] = lin(w, 3 * w)
        p[f"block{i}.qkv_b"] = np.zeros(3 * w)
        p[f"block{i}.attn_w"] = lin(w, w)
        p[f"block{i}.attn_b"] = np.zeros(w)
        p[f"block{i}.mlp1_w"] = lin(w, 4 * w)
        p[f"block{i}.mlp1_b"] = np.zeros(4 * w)
        p[f"block{i}.mlp2_w"] = lin(4 * w, w)
        p[f"block{i}.mlp2_b"] = np.zeros(w)
        p[f"block{i}.cond1_w"] = lin(e, hid)
        p[f"block{i}.cond1_b"] = np.zeros(hid)
        p[f"block{i}.cond2_w"] = np.zeros((hid, 4 * w))
        p[f"block{i}.cond2_b"] = np.zeros(4 * w)
    p["out_proj_w"] = lin(w, config.token_dim_out)
    p["out_proj_b"] = np.zeros(config.token_dim_out)
    return p


def count_params(params: dict[str, np.ndarray], prefix: str = "") -> int:
    """Total scalar parameters, optionally only keys under a prefix."""
    return sum(v.size for k, v in params.items() if k.startswith(prefix))


def _lin(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (..., F) @ w (F, G) + b as one flat matmul."""
    y = x.reshape(-1, x.shape[-1]) @ w
    y += b
    return y.reshape(x.shape[:-1] + (w.shape[1],))


def _lin_bwd(dout, x, w):
    """Gradients of _lin: returns (dx, dw, db)."""
    d2 = dout.reshape(-1, dout.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dx = (d2 @ w.T).reshape(x.shape)
    return dx, x2.T @ d2, d2.sum(axis=0)


def _silu(x: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _silu_bwd(dout, x, sig):
    return dout * sig * (1.0 + x * (1.0 - sig))


def _cond_vectors(params, i: int, temb: np.ndarray):
    """Per-block modulation (s1, b1, s2, b2), each (B, width), plus cache."""
    pre = _lin(temb, params[f"block{i}.cond1_w"], params[f"block{i}.cond1_b"])
    act, sig = _silu(pre)
    vec = _lin(act, params[f"block{i}.cond2_w"], params[f"block{i}.cond2_b"])
    s1, b1, s2, b2 = np.split(vec, 4, axis=-1)
    return (s1, b1, s2, b2), {"pre": pre, "sig": sig, "act": act}


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, w = x.shape
    return x.reshape(b, n, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, h * hd)


def _block_forward(params, config, i, h, mod, want_cache: bool):
    """One residual block; mod = (s1, b1, s2, b2) rows broadcast over tokens."""
    s1, b1, s2, b2 = (m[:, None, :] for m in mod)
    heads = config.heads
    scale = 1.0 / np.sqrt(config.head_dim)

    xh1, istd1 = layernorm_fwd(h)
    m1 = xh1 * (1.0 + s1) + b1
    qkv = _lin(m1, params[f"block{i}.qkv_w"], params[f"block{i}.qkv_b"])
    q, k, v = (_split_heads(part, heads) for part in np.split(qkv, 3, axis=-1))
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    p = softmax_fwd(scores)
    ctx = _merge_heads(p @ v)
    att = _lin(ctx, params[f"block{i}.attn_w"], params[f"block{i}.attn_b"])
    h_mid = h + att

    xh2, istd2 = layernorm_fwd(h_mid)
    m2 = xh2 * (1.0 + s2) + b2
    u1 = _lin(m2, params[f"block{i}.mlp1_w"], params[f"block{i}.mlp1_b"])
    g, gt = gelu_fwd(u1)
    u2 = _lin(g, params[f"block{i}.mlp2_w"], params[f"block{i}.mlp2_b"])
    h_out = h_mid + u2

    cache = None
    if want_cache:
        cache = {
            "xh1": xh1, "istd1": istd1, "m1": m1, "q": q, "k": k, "v": v,
            "p": p, "ctx": ctx, "xh2": xh2, "istd2": istd2, "m2": m2,
            "u1": u1, "gt": gt,
        }
    return h_out, cache


def _block_backward(params, config, i, dh_out, mod, cond_cache, cache, grads, temb):
    """Backward through one block; returns gradient wrt the block input."""
    s1, b1, s2, b2 = (m[:, None, :] for m in mod)
    heads = config.heads
    scale = 1.0 / np.sqrt(config.head_dim)
    pre = f"block{i}."

    # mlp sublayer: h_out = h_mid + mlp(modulate(ln(h_mid)))
    g = 0.5 * cache["u1"] * (1.0 + cache["gt"])  # recomputed GELU output
    dg, grads[pre + "mlp2_w"], grads[pre + "mlp2_b"] = _lin_bwd(
        dh_out, g, params[pre + "mlp2_w"]
    )
    du1 = gelu_bwd(dg, cache["u1"], cache["gt"])
    dm2, grads[pre + "mlp1_w"], grads[pre + "mlp1_b"] = _lin_bwd(
        du1, cache["m2"], params[pre + "mlp1_w"]
    )
    dxh2 = dm2 * (1.0 + s2)
    ds2 = np.sum(dm2 * cache["xh2"], axis=1)
    db2 = np.sum(dm2, axis=1)
    dh_mid = dh_out + layernorm_bwd(dxh2, cache["xh2"], cache["istd2"])

    # attention sublayer: h_mid = h_in + attn(modulate(ln(h_in)))
    dctx, grads[pre + "attn_w"], grads[pre + "attn_b"] = _lin_bwd(
        dh_mid, cache["ctx"], params[pre + "attn_w"]
    )
    dctx_h = _split_heads(dctx, heads)
    dp = dctx_h @ cache["v"].transpose(0, 1, 3, 2)
    dv = cache["p"].transpose(0, 1, 3, 2) @ dctx_h
    dscores = softmax_bwd(dp, cache["p"])
    dq = (dscores @ cache["k"]) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ cache["q"]) * scale
    dqkv = np.concatenate(
        [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
    )
    dm1, grads[pre + "qkv_w"], grads[pre + "qkv_b"] = _lin_bwd(
        dqkv, cache["m1"], params[pre + "qkv_w"]
    )
    dxh1 = dm1 * (1.0 + s1)
    ds1 = np.sum(dm1 * cache["xh1"], axis=1)
    db1 = np.sum(dm1, axis=1)
    dh_in = dh_mid + layernorm_bwd(dxh1, cache["xh1"], cache["istd1"])

    # conditioning MLP: gradients flow from all four modulation vectors
    dvec = np.concatenate([ds1, db1, ds2, db2], axis=-1)
    if mod[0].shape[0] == 1 and dvec.shape[0] != 1:
        dvec = dvec.sum(axis=0, keepdims=True)  # scalar t broadcast over batch
    dact, grads[pre + "cond2_w"], grads[pre + "cond2_b"] = _lin_bwd(
        dvec, cond_cache["act"], params[pre + "cond2_w"]
    )
    dpre = _silu_bwd(dact, cond_cache["pre"], cond_cache["sig"])
    _, grads[pre + "cond1_w"], grads[pre + "cond1_b"] = _lin_bwd(
        dpre, temb, params[pre + "cond1_w"]
    )
    return dh_in


def _check_input(config: DenoiserConfig, x: np.ndarray, t) -> np.ndarray:
    if x.ndim != 3 or x.shape[1] != config.tokens or x.shape[2] != config.token_dim_in:
        raise ValueError(
            f"expected ({x.shape[0]}, {config.tokens}, {config.token_dim_in}) "
            f"input, got {x.shape}"
        )
    t = np.asarray(t)
    if t.ndim == 1 and t.shape[0] != x.shape[0]:
        raise ValueError(f"{t.shape[0]} times for batch {x.shape[0]}")
    return t


def forward(params, config: DenoiserConfig, x: np.ndarray, t, want_cache: bool = False):
    """Predict output tokens for x (B, tokens, token_dim_in) at times t.

    t is a scalar (shared by the batch; conditioning computed once and
    broadcast) or a (B,) integer array. Returns (out, cache); cache is
    None unless requested.
    """
    t = _check_input(config, x, t)
    temb = time_embedding(t, config.time_embed_dim)
    h = _lin(x, params["in_proj_w"], params["in_proj_b"]) + params["pos_embed"]

    mods, cond_caches, block_caches = [], [], []
    for i in range(config.depth):
        mod, ccache = _cond_vectors(params, i, temb)
        h, bcache = _block_forward(params, config, i, h, mod, want_cache)
        mods.append(mod)
        cond_caches.append(ccache)
        block_caches.append(bcache)

    xhf, istdf = layernorm_fwd(h)
    out = _lin(xhf, params["out_proj_w"], params["out_proj_b"])
    cache = None
    if want_cache:
        cache = {
            "x": x, "temb": temb, "mods": mods, "cond": cond_caches,
            "blocks": block_caches, "xhf": xhf, "istdf": istdf,
        }
    return out, cache


def backward(params, config: DenoiserConfig, cache, dout: np.ndarray):
    """Gradients of a scalar loss given d loss / d out; returns a dict
    with exactly the parameter keys."""
    grads: dict[str, np.ndarray] = {}
    dxhf, grads["out_proj_w"], grads["out_proj_b"] = _lin_bwd(
        dout, cache["xhf"], params["out_proj_w"]
    )
    dh = layernorm_bwd(dxhf, cache["xhf"], cache["istdf"])
    for i in reversed(range(config.depth)):
        dh = _block_backward(
            params, config, i, dh, cache["mods"][i], cache["cond"][i],
            cache["blocks"][i], grads, cache["temb"],
        )
    grads["pos_embed"] = dh.sum(axis=0)
    _, grads["in_proj_w"], grads["in_proj_b"] = _lin_bwd(
        dh, cache["x"], params["in_proj_w"]
    )
    return grads


def encoder_features(params, config: DenoiserConfig, x: np.ndarray, t, enc_blocks: int):
    """Token-averaged activations after enc_blocks blocks, shape (B, width)."""
    if not (1 <= enc_blocks <= config.depth):
        raise ValueError(f"enc_blocks {enc_blocks} out of range [1, {config.depth}]")
    t = _check_input(config, x, t)
    temb = time_embedding(t, config.time_embed_dim)
    h = _lin(x, params["in_proj_w"], params["in_proj_b"]) + params["pos_embed"]
    for i in range(enc_blocks):
        mod, _ = _cond_vectors(params, i, temb)
        h, _ = _block_forward(params, config, i, h, mod, False)
    return h.mean(axis=1)


@dataclass(frozen=True)
class MergedConditioning:
    """Modulation constants for one fixed t, one row per block."""

    t: int
    scale1: np.ndarray  # (depth, width)
    bias1: np.ndarray
    scale2: np.ndarray
    bias2: np.ndarray

    def size(self, blocks: int | None = None) -> int:
        b = self.scale1.shape[0] if blocks is None else blocks
        return 4 * b * self.scale1.shape[1]


def merge_conditioning(params, config: DenoiserConfig, t: int) -> MergedConditioning:
    """Fold the conditioning MLPs at a fixed t into per-block constants."""
    temb = time_embedding(int(t), config.time_embed_dim)  # (1, E)
    rows = [_cond_vectors(params, i, temb)[0] for i in range(config.depth)]
    return MergedConditioning(
        t=int(t),
        scale1=np.concatenate([r[0] for r in rows], axis=0),
        bias1=np.concatenate([r[1] for r in rows], axis=0),
        scale2=np.concatenate([r[2] for r in rows], axis=0),
        bias2=np.concatenate([r[3] for r in rows], axis=0),
    )


def merged_features(
    params, config: DenoiserConfig, x: np.ndarray, merged: MergedConditioning,
    enc_blocks: int,
):
    """encoder_features using precomputed constants; no conditioning MLPs.

    Bit-identical to encoder_features at the same fixed t because both
    broadcast one (1, width) modulation row over the batch.
    """
    if not (1 <= enc_blocks <= config.depth):
        raise ValueError(f"enc_blocks {enc_blocks} out of range [1, {config.depth}]")
    h = _lin(x, params["in_proj_w"], params["in_proj_b"]) + params["pos_embed"]
    for i in range(enc_blocks):
        mod = (
            merged.scale1[i : i + 1], merged.bias1[i : i + 1],
            merged.scale2[i : i + 1], merged.bias2[i : i + 1],
        )
        h, _ = _block_forward(params, config, i, h, mod, False)
    return h.mean(axis=1)


def merged_encoder_param_count(
    params, config: DenoiserConfig, merged: MergedConditioning, enc_blocks: int
) -> int:
    """Parameters of the merged encoder: projections, positions, block
    weights, and the folded per-block scale/bias constants."""
    n = params["in_proj_w"].size + params["in_proj_b"].size + params["pos_embed"].size
    for i in range(enc_blocks):
        for name in ("qkv_w", "qkv_b", "attn_w", "attn_b",
                     "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b"):
            n += params[f"block{i}.{name}"].size
    return n + merged.size(enc_blocks)


def plain_transformer_param_count(config: DenoiserConfig, enc_blocks: int) -> int:
    """Analytic parameter count of an unconditioned pre-norm transformer
    encoder of the same shape, counting affine layer norms."""
    w = config.width
    n = (config.token_dim_in + 1) * w + config.tokens * w
    per_block = (
        (w + 1) * 3 * w  # qkv
        + (w + 1) * w  # attention output
        + (w + 1) * 4 * w + (4 * w + 1) * w  # mlp
        + 2 * (2 * w)  # two affine layer norms
    )
    return n + enc_blocks * per_block


def save_denoiser(path, config: DenoiserConfig, params: dict[str, np.ndarray]) -> None:
    scalars = {
        "token_dim_in": config.token_dim_in,
        "token_dim_out": config.token_dim_out,
        "tokens": config.tokens,
        "width": config.width,
        "depth": config.depth,
        "heads": config.heads,
        "time_embed_dim": config.time_embed_dim,
    }
    checkpoint.save_container(path, "denoiser", scalars, params)


def load_denoiser(path):
    """Returns (config, params); bit-exact round trip."""
    _, scalars, tensors = checkpoint.load_container(path, expect_kind="denoiser")
    config = DenoiserConfig(**{k: int(v) for k, v in scalars.items()})
    return config, tensors
