"""Local branch: plain convolutions over the equirectangular panorama.

A two-conv stride-2 stem brings the input to H/4, then four residual blocks
separated by stride-2 downsampling convs emit the same four pyramid shapes as
the transformer branch. Convolutions are ordinary (no spherical variants, no
circular padding); distortion handling is the other branch's job.
"""

from __future__ import annotations

import numpy as np

from . import init, ops
from .autodiff import Tensor
from .config import ModelConfig

# forward-pass residual block counter, used by tests
_block_calls = 0


def reset_block_counter() -> None:
    global _block_calls
    _block_calls = 0


def block_call_count() -> int:
    return _block_calls


def init_cnn_params(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict:
    c1 = cfg.level_channels[0]
    params = {
        "cnn.stem.c1.w": init.kaiming_uniform(rng, (c1, 3, 3, 3), 3 * 9, dtype),
        "cnn.stem.c1.b": init.zeros((c1,), dtype),
        "cnn.stem.c2.w": init.kaiming_uniform(rng, (c1, c1, 3, 3), c1 * 9, dtype),
        "cnn.stem.c2.b": init.zeros((c1,), dtype),
    }
    for level in range(1, 5):
        c = cfg.level_channels[level - 1]
        pre = f"cnn.level{level}"
        params[f"{pre}.c1.w"] = init.kaiming_uniform(rng, (c, c, 3, 3), c * 9, dtype)
        params[f"{pre}.c1.b"] = init.zeros((c,), dtype)
        params[f"{pre}.c2.w"] = init.kaiming_uniform(rng, (c, c, 3, 3), c * 9, dtype)
        params[f"{pre}.c2.b"] = init.zeros((c,), dtype)
        if level >= 2:
            cp = cfg.level_channels[level - 2]
            params[f"cnn.down{level}.w"] = init.kaiming_uniform(rng, (c, cp, 3, 3), cp * 9, dtype)
            params[f"cnn.down{level}.b"] = init.zeros((c,), dtype)
    return params


def residual_block(x: Tensor, params: dict, prefix: str) -> Tensor:
    """relu(x + conv2(relu(conv1(x)))), both convs 3x3 stride 1 pad 1."""
    global _block_calls
    _block_calls += 1
    h = ops.relu(ops.conv2d(x, params[f"{prefix}.c1.w"], params[f"{prefix}.c1.b"], stride=1, pad=1))
    h = ops.conv2d(h, params[f"{prefix}.c2.w"], params[f"{prefix}.c2.b"], stride=1, pad=1)
    return ops.relu(ops.add(x, h))


def downsample(x: Tensor, params: dict, prefix: str) -> Tensor:
    """3x3 stride-2 conv, pad 1; halves the spatial size, changes width."""
    return ops.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=2, pad=1)


def cnn_forward(pano: Tensor, cfg: ModelConfig, params: dict) -> list:
    """Panorama (3, H, 2H) -> four local feature maps at H/4 ... H/32."""
    x = ops.relu(ops.conv2d(pano, params["cnn.stem.c1.w"], params["cnn.stem.c1.b"], stride=2, pad=1))
    x = ops.relu(ops.conv2d(x, params["cnn.stem.c2.w"], params["cnn.stem.c2.b"], stride=2, pad=1))
    pyramid = []
    for level in range(1, 5):
        if level >= 2:
            x = downsample(x, params, f"cnn.down{level}")
        x = residual_block(x, params, f"cnn.level{level}")
        pyramid.append(x)
    return pyramid
