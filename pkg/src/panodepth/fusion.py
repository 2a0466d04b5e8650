"""Gated fusion of the two feature pyramids and top-down decoding to depth.

At every level the global and local maps are blended by a learned sigmoid
gate: G = sigmoid(conv(conv(fg + fl))), out = fg*G + fl*(1-G), so the output
is a per-element convex combination of the branches. The concat variant
replaces the gate with channel concatenation plus a 1x1 projection. The
decoder walks the fused pyramid coarse-to-fine with 3x3 convs, x2 bilinear
upsamples and 1x1-aligned additions, then a x4 head produces full-resolution
nonnegative depth.
"""

from __future__ import annotations

import numpy as np

from . import init, ops
from .autodiff import Tensor
from .cnn_branch import cnn_forward, init_cnn_params
from .config import ModelConfig
from .errors import ContractError, ShapeError
from .projection import resample_equirect_to_cubemap
from .vit_branch import init_vit_params, vit_forward


def init_fusion_params(cfg: ModelConfig, rng: np.random.Generator, dtype,
                       zero_residual: bool = True) -> dict:
    params = {}
    for level in range(1, 5):
        c = cfg.level_channels[level - 1]
        pre = f"fuse.level{level}"
        if cfg.fusion_mode == "gated":
            # first conv random, second zeroed: the gate starts exactly at 0.5
            # everywhere yet unfreezes after one step (the second conv's weight
            # gradient is nonzero because its input is)
            params[f"{pre}.c1.w"] = init.kaiming_uniform(rng, (c, c, 3, 3), c * 9, dtype)
            params[f"{pre}.c1.b"] = init.zeros((c,), dtype)
            params[f"{pre}.c2.w"] = (init.zeros((c, c, 3, 3), dtype) if zero_residual
                                     else init.kaiming_uniform(rng, (c, c, 3, 3), c * 9, dtype))
            params[f"{pre}.c2.b"] = init.zeros((c,), dtype)
        else:
            params[f"{pre}.proj.w"] = init.kaiming_uniform(rng, (c, 2 * c, 1, 1), 2 * c, dtype)
            params[f"{pre}.proj.b"] = init.zeros((c,), dtype)
    return params


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict:
    params = {}
    for level in (4, 3, 2):
        c = cfg.level_channels[level - 1]
        c_next = cfg.level_channels[level - 2]
        pre = f"dec.level{level}"
        params[f"{pre}.conv.w"] = init.kaiming_uniform(rng, (c, c, 3, 3), c * 9, dtype)
        params[f"{pre}.conv.b"] = init.zeros((c,), dtype)
        params[f"{pre}.align.w"] = init.kaiming_uniform(rng, (c_next, c, 1, 1), c, dtype)
        params[f"{pre}.align.b"] = init.zeros((c_next,), dtype)
    c1 = cfg.level_channels[0]
    params["dec.head.c1.w"] = init.kaiming_uniform(rng, (c1, c1, 3, 3), c1 * 9, dtype)
    params["dec.head.c1.b"] = init.zeros((c1,), dtype)
    params["dec.head.c2.w"] = init.kaiming_uniform(rng, (1, c1, 3, 3), c1 * 9, dtype)
    # start the relu head around 1 m so no output pixel is born dead
    params["dec.head.c2.b"] = init.full((1,), 1.0, dtype)
    return params


def init_model_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64,
                      zero_residual: bool = True) -> dict:
    """All parameters of both branches, fusion and decoder, one flat dict."""
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_vit_params(cfg, rng, dtype, zero_residual=zero_residual))
    params.update(init_cnn_params(cfg, rng, dtype))
    params.update(init_fusion_params(cfg, rng, dtype, zero_residual=zero_residual))
    params.update(init_decoder_params(cfg, rng, dtype))
    return params


def gated_fuse(fg: Tensor, fl: Tensor, params: dict, prefix: str, mode: str) -> Tensor:
    """Blend one pyramid level from each branch; see module docstring."""
    if fg.shape != fl.shape:
        raise ShapeError(f"fusion inputs differ: {fg.shape} vs {fl.shape}")
    if mode == "gated":
        s = ops.add(fg, fl)
        h = ops.conv2d(s, params[f"{prefix}.c1.w"], params[f"{prefix}.c1.b"], stride=1, pad=1)
        logits = ops.conv2d(h, params[f"{prefix}.c2.w"], params[f"{prefix}.c2.b"], stride=1, pad=1)
        gate = ops.sigmoid(logits)
        inv = ops.sub(Tensor(np.ones(gate.shape, dtype=gate.dtype)), gate)
        return ops.add(ops.mul(fg, gate), ops.mul(fl, inv))
    if mode == "concat":
        cat = ops.concat([fg, fl], axis=0)
        return ops.conv2d(cat, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"],
                          stride=1, pad=0)
    raise ContractError(f"unknown fusion mode {mode!r}")


def decoder_forward(fused: list, cfg: ModelConfig, params: dict) -> Tensor:
    """Fused pyramid (levels 1..4) -> (1, H, 2H) nonnegative depth map."""
    if len(fused) != 4:
        raise ContractError(f"decoder expects 4 fused levels, got {len(fused)}")
    x = fused[3]
    for level in (4, 3, 2):
        pre = f"dec.level{level}"
        x = ops.conv2d(x, params[f"{pre}.conv.w"], params[f"{pre}.conv.b"], stride=1, pad=1)
        x = ops.upsample_bilinear(x, 2)
        x = ops.conv2d(x, params[f"{pre}.align.w"], params[f"{pre}.align.b"], stride=1, pad=0)
        x = ops.add(x, fused[level - 2])
    x = ops.conv2d(x, params["dec.head.c1.w"], params["dec.head.c1.b"], stride=1, pad=1)
    x = ops.upsample_bilinear(x, 4)
    x = ops.conv2d(x, params["dec.head.c2.w"], params["dec.head.c2.b"], stride=1, pad=1)
    return ops.relu(x)


def model_forward(pano: Tensor, cfg: ModelConfig, params: dict) -> Tensor:
    """Full two-branch forward pass: (3, H, 2H) panorama -> (1, H, 2H) depth."""
    if pano.ndim != 3 or pano.shape[0] != 3 or pano.shape[2] != 2 * pano.shape[1]:
        raise ShapeError(f"expected (3, H, 2H) panorama, got {pano.shape}")
    if pano.shape[1] != cfg.h:
        raise ShapeError(f"panorama height {pano.shape[1]} != configured {cfg.h}")
    cm = resample_equirect_to_cubemap(pano)
    f_global = vit_forward(cm, cfg, params)
    f_local = cnn_forward(pano, cfg, params)
    fused = [gated_fuse(f_global[i], f_local[i], params, f"fuse.level{i + 1}", cfg.fusion_mode)
             for i in range(4)]
    return decoder_forward(fused, cfg, params)
