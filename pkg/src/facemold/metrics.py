"""Depth-accuracy metrics: mean and 90th-percentile absolute depth error.

Predictions and ground truth live in model units, so each pair is aligned by
the scalar offset minimizing mean absolute error (the masked median of the
difference) before errors are measured.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError
from .raster import DepthMap


@dataclass(frozen=True)
class DepthErrorStats:
    mean_abs_err: float
    p90_abs_err: float
    pixel_count: int
    offset: float

    def to_dict(self) -> dict:
        return asdict(self)


def joint_mask(masks) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        raise ValueError("joint_mask needs at least one mask")
    out = masks[0].copy()
    for m in masks[1:]:
        if m.shape != out.shape:
            raise DimensionError(f"mask shapes differ: {m.shape} vs {out.shape}")
        out &= m
    return out


def _aligned_errors(pred: DepthMap, gt: DepthMap, mask):
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    m = pred.valid & gt.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise DimensionError(f"mask {mask.shape} vs depth {m.shape}")
        m &= mask
    if not m.any():
        raise ValueError("evaluation mask is empty")
    diff = pred.depth[m] - gt.depth[m]
    offset = float(np.median(diff))
    return m, np.abs(diff - offset), offset


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    rank = max(1, math.ceil(q * sorted_values.size))
    return float(sorted_values[rank - 1])


def depth_error_stats(pred: DepthMap, gt: DepthMap, mask=None) -> DepthErrorStats:
    _, err, offset = _aligned_errors(pred, gt, mask)
    return DepthErrorStats(
        mean_abs_err=float(err.mean()),
        p90_abs_err=nearest_rank(np.sort(err), 0.9),
        pixel_count=int(err.size),
        offset=offset,
    )


def error_heatmap(pred: DepthMap, gt: DepthMap, mask=None) -> np.ndarray:
    """Per-pixel offset-aligned absolute error, zero outside the mask."""
    m, err, _ = _aligned_errors(pred, gt, mask)
    out = np.zeros(pred.shape)
    out[m] = err
    return out


def masked_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    d = (np.asarray(a) - np.asarray(b))[mask]
    return float(np.sqrt(np.mean(d * d)))
