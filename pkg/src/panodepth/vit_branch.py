"""Global branch: a vision transformer over cubemap patch tokens.

The cubemap is cut into non-overlapping p x p patches on every face, embedded
to width d tokens (face-major order) and pushed through k pre-norm transformer
blocks. Because attention mixes tokens from all six faces in one sequence,
features stay coherent across face boundaries. Token states tapped at four
blocks are reassembled onto the equirect-aligned H/p x W/p grid by a learned
linear map over the token axis, then rescaled to the four pyramid resolutions
(H/4 ... H/32) by 1x1 conv + pixel shuffle (or stride-2 convs when the level
sits below the grid resolution).
"""

from __future__ import annotations

import math

import numpy as np

from . import init, ops
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ContractError
from .projection import CubemapTensor


def _recover_factor(cfg: ModelConfig, level: int) -> int:
    """Scale from the token grid (H/p) to pyramid level `level` (H/2^(level+1)).

    Positive r means pixel-shuffle upscale by r; negative n means n stride-2
    downsampling convs. p=16 gives the canonical (x4, x2, x1, /2) ladder.
    """
    num, den = cfg.p, 2 ** (level + 1)
    if num >= den:
        return num // den
    return -int(math.log2(den // num))


def init_vit_params(cfg: ModelConfig, rng: np.random.Generator, dtype,
                    zero_residual: bool = True) -> dict:
    """Build the parameter dict for the transformer branch.

    zero_residual zeroes the attention and MLP output projections so every
    block starts as the identity map; pass False for a fully random start.
    """
    d, p = cfg.d, cfg.p
    patch_dim = 3 * p * p
    params = {
        "vit.patch_proj.w": init.kaiming_uniform(rng, (patch_dim, d), patch_dim, dtype),
        "vit.patch_proj.b": init.zeros((d,), dtype),
        "vit.pos": init.trunc_normal(rng, (cfg.tokens, d), 0.02, dtype),
    }
    hidden = cfg.mlp_ratio * d
    for i in range(1, cfg.k + 1):
        pre = f"vit.block{i}"
        params[f"{pre}.ln1.g"] = init.ones((d,), dtype)
        params[f"{pre}.ln1.b"] = init.zeros((d,), dtype)
        for name in ("wq", "wk", "wv"):
            params[f"{pre}.attn.{name}"] = init.kaiming_uniform(rng, (d, d), d, dtype)
        params[f"{pre}.attn.wo"] = (init.zeros((d, d), dtype) if zero_residual
                                    else init.kaiming_uniform(rng, (d, d), d, dtype))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{pre}.attn.{name}"] = init.zeros((d,), dtype)
        params[f"{pre}.ln2.g"] = init.ones((d,), dtype)
        params[f"{pre}.ln2.b"] = init.zeros((d,), dtype)
        params[f"{pre}.mlp.w1"] = init.kaiming_uniform(rng, (d, hidden), d, dtype)
        params[f"{pre}.mlp.b1"] = init.zeros((hidden,), dtype)
        params[f"{pre}.mlp.w2"] = (init.zeros((hidden, d), dtype) if zero_residual
                                   else init.kaiming_uniform(rng, (hidden, d), hidden, dtype))
        params[f"{pre}.mlp.b2"] = init.zeros((d,), dtype)

    grid_n = (cfg.h // p) * (cfg.w // p)
    for level in range(1, 5):
        pre = f"vit.tap{level}"
        params[f"{pre}.map"] = init.kaiming_uniform(rng, (grid_n, cfg.tokens), cfg.tokens, dtype)
        params[f"{pre}.proj.w"] = init.kaiming_uniform(rng, (d, d), d, dtype)
        params[f"{pre}.proj.b"] = init.zeros((d,), dtype)
        c_l = cfg.level_channels[level - 1]
        r = _recover_factor(cfg, level)
        c_out = c_l * r * r if r > 1 else c_l
        params[f"{pre}.rec.w"] = init.kaiming_uniform(rng, (c_out, d, 1, 1), d, dtype)
        params[f"{pre}.rec.b"] = init.zeros((c_out,), dtype)
        for j in range(1, -r + 1):
            params[f"{pre}.rec.down{j}.w"] = init.kaiming_uniform(rng, (c_l, c_l, 3, 3), c_l * 9, dtype)
            params[f"{pre}.rec.down{j}.b"] = init.zeros((c_l,), dtype)
    return params


def patchify_and_embed(cm: CubemapTensor, cfg: ModelConfig, params: dict) -> Tensor:
    """Cubemap -> (N_p, d) tokens: flatten patches, project, add positions."""
    raw = ops.patchify(cm.faces, cfg.p)                     # (N_p, 3*p*p)
    tok = ops.bias_add(ops.matmul(raw, params["vit.patch_proj.w"]),
                       params["vit.patch_proj.b"], 1)
    return ops.add(tok, params["vit.pos"])


def _attention(x: Tensor, params: dict, pre: str, cfg: ModelConfig) -> Tensor:
    n, d = x.shape
    dh = d // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    q = ops.bias_add(ops.matmul(x, params[f"{pre}.wq"]), params[f"{pre}.bq"], 1)
    k = ops.bias_add(ops.matmul(x, params[f"{pre}.wk"]), params[f"{pre}.bk"], 1)
    v = ops.bias_add(ops.matmul(x, params[f"{pre}.wv"]), params[f"{pre}.bv"], 1)
    heads = []
    for h in range(cfg.heads):
        qh = ops.narrow(q, 1, h * dh, dh)
        kh = ops.narrow(k, 1, h * dh, dh)
        vh = ops.narrow(v, 1, h * dh, dh)
        attn = ops.softmax_lastdim(ops.mul_scalar(ops.matmul(qh, ops.transpose(kh)), scale))
        heads.append(ops.matmul(attn, vh))
    merged = ops.concat(heads, axis=1)
    return ops.bias_add(ops.matmul(merged, params[f"{pre}.wo"]), params[f"{pre}.bo"], 1)


def transformer_block(t: Tensor, params: dict, prefix: str, cfg: ModelConfig) -> Tensor:
    """Pre-norm block: t + MHSA(LN(t)), then + MLP(LN(.))."""
    t = ops.add(t, _attention(ops.layer_norm(t, params[f"{prefix}.ln1.g"],
                                             params[f"{prefix}.ln1.b"]),
                              params, f"{prefix}.attn", cfg))
    x = ops.layer_norm(t, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = ops.gelu(ops.bias_add(ops.matmul(x, params[f"{prefix}.mlp.w1"]),
                              params[f"{prefix}.mlp.b1"], 1))
    out = ops.bias_add(ops.matmul(h, params[f"{prefix}.mlp.w2"]),
                       params[f"{prefix}.mlp.b2"], 1)
    return ops.add(t, out)


def reassemble(t: Tensor, cfg: ModelConfig, params: dict, level: int) -> Tensor:
    """Tokens (N_p, d) -> (d, H/p, W/p) equirect-aligned map.

    The token axis is sent to grid positions by a learned linear map (the
    token count 6*(H/2p)^2 and grid count 2*(H/p)^2 differ, so no fixed
    reshape exists), then a channel projection mixes features.
    """
    gh, gw = cfg.h // cfg.p, cfg.w // cfg.p
    pre = f"vit.tap{level}"
    mapped = ops.matmul(params[f"{pre}.map"], t)            # (gh*gw, d)
    mixed = ops.bias_add(ops.matmul(mapped, params[f"{pre}.proj.w"]),
                         params[f"{pre}.proj.b"], 1)
    return ops.transpose(ops.reshape(mixed, (gh, gw, cfg.d)), (2, 0, 1))


def recover_scale(m: Tensor, level: int, cfg: ModelConfig, params: dict) -> Tensor:
    """Rescale a reassembled map to its pyramid level's resolution and width."""
    if level not in (1, 2, 3, 4):
        raise ContractError(f"pyramid level must be 1..4, got {level}")
    pre = f"vit.tap{level}"
    r = _recover_factor(cfg, level)
    out = ops.conv2d(m, params[f"{pre}.rec.w"], params[f"{pre}.rec.b"], stride=1, pad=0)
    if r > 1:
        out = ops.pixel_shuffle(out, r)
    for j in range(1, -r + 1):
        out = ops.conv2d(out, params[f"{pre}.rec.down{j}.w"],
                         params[f"{pre}.rec.down{j}.b"], stride=2, pad=1)
    return out


def vit_forward(cm: CubemapTensor, cfg: ModelConfig, params: dict) -> list:
    """Run all blocks, tap four token states, return pyramid levels 1..4.

    The earliest tap feeds the finest level, so shallower (higher-resolution)
    features end up at the top of the pyramid.
    """
    t = patchify_and_embed(cm, cfg, params)
    tapped = {}
    for i in range(1, cfg.k + 1):
        t = transformer_block(t, params, f"vit.block{i}", cfg)
        if i in cfg.taps:
            tapped[i] = t
    pyramid = []
    for level, tap in enumerate(cfg.taps, start=1):
        pyramid.append(recover_scale(reassemble(tapped[tap], cfg, params, level),
                                     level, cfg, params))
    return pyramid
