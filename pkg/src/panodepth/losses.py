"""Masked BerHu training objective and the panoramic depth metric suite.

Depth maps are (1, H, W) in meters; validity masks are (H, W) booleans, true
where ground truth is positive and finite. Invalid pixels are never read, so
garbage (even NaN) stored there cannot leak into the loss or metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import SampleRejectedError, ShapeError
from .ops import _record


@dataclass
class ValidityMask:
    mask: np.ndarray          # (H, W) bool
    count_valid: int


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    KEYS = ("mae", "rmse", "rmse_log", "delta1", "delta2", "delta3")

    def as_text(self) -> str:
        return "\n".join(f"{k}={getattr(self, k):.10g}" for k in self.KEYS) + "\n"

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}


def validity_mask(gt) -> ValidityMask:
    """Valid pixels are those with positive, finite ground-truth depth."""
    data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ShapeError(f"depth map must be (1, H, W), got {data.shape}")
        data = data[0]
    mask = np.isfinite(data) & (data > 0)
    count = int(mask.sum())
    if count == 0:
        raise SampleRejectedError("sample has no valid depth pixels")
    return ValidityMask(mask=mask, count_valid=count)


def _flat_valid(arr: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr[0]
    if arr.shape != mask.shape:
        raise ShapeError(f"map shape {arr.shape} != mask shape {mask.shape}")
    return arr[mask]


def berhu_loss(pred: Tensor, gt, mask: ValidityMask, t: float = 0.2) -> Tensor:
    """Reverse Huber over valid pixels, mean-reduced; differentiable in pred.

    Per pixel with d = y - y_hat: |d| when |d| <= t, else (d^2 + t^2) / (2t).
    The two branches and their derivatives agree at |d| = t.
    """
    if t <= 0:
        raise SampleRejectedError(f"berhu threshold must be positive, got {t}")
    if mask.count_valid < 1:
        raise SampleRejectedError("berhu_loss on an empty mask")
    gt_data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt_data.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt_data.shape}")
    m = mask.mask
    d = _flat_valid(gt_data, m) - _flat_valid(pred.data, m)
    absd = np.abs(d)
    small = absd <= t
    per_pixel = np.where(small, absd, (d * d + t * t) / (2.0 * t))
    loss_val = per_pixel.mean()
    out = Tensor(np.array(loss_val, dtype=pred.dtype), requires_grad=pred.requires_grad)

    pred_shape = pred.shape

    def bwd(g):
        # dL/dpred = -sign(d) on the L1 branch, -d/t on the quadratic one
        dflat = np.where(small, -np.sign(d), -d / t) * (float(g) / mask.count_valid)
        gp = np.zeros(pred_shape, dtype=pred.dtype)
        view = gp[0] if gp.ndim == 3 else gp
        view[m] = dflat
        return (gp,)

    _record((pred,), out, bwd)
    return out


def depth_metrics(pred, gt, mask: ValidityMask) -> MetricsReport:
    """MAE / RMSE / log-space RMSE plus the three ratio-threshold accuracies.

    pred is clamped to >= 1e-6 before the log and ratio computations; the
    delta comparisons are inclusive so a ratio of exactly 1.25 counts.
    """
    if mask.count_valid < 1:
        raise SampleRejectedError("depth_metrics on an empty mask")
    pred_data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    gt_data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred_data.shape != gt_data.shape:
        raise ShapeError(f"pred {pred_data.shape} vs gt {gt_data.shape}")
    m = mask.mask
    p = _flat_valid(pred_data, m)
    y = _flat_valid(gt_data, m)
    d = p - y
    pc = np.maximum(p, 1e-6)
    ratio = np.maximum(pc / y, y / pc)
    log_d = np.log(pc) - np.log(y)
    return MetricsReport(
        mae=float(np.abs(d).mean()),
        rmse=float(np.sqrt((d * d).mean())),
        rmse_log=float(np.sqrt((log_d * log_d).mean())),
        delta1=float((ratio <= 1.25).mean()),
        delta2=float((ratio <= 1.25 ** 2).mean()),
        delta3=float((ratio <= 1.25 ** 3).mean()),
    )
