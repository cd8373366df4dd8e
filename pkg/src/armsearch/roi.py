"""RoIAlign as a fixed linear resampling of the feature map.

Boxes are in feature-map units with cell ``(i, j)`` covering
``[j, j+1) x [i, i+1)``; sample points therefore sit at half-pixel offsets.
Each output cell averages a 2x2 grid of bilinear samples.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, getitem, matmul

SAMPLES = 2


def _axis_weights(start: float, length: float, bins: int, size: int) -> np.ndarray:
    """[bins, size] interpolation weights along one axis, averaged over the
    per-bin sample points."""
    step = length / bins
    offsets = (np.arange(SAMPLES) + 0.5) * step / SAMPLES
    coord = (start + np.arange(bins)[:, None] * step + offsets[None, :] - 0.5).ravel()
    valid = (coord >= -1.0) & (coord <= size)
    coord = np.maximum(coord, 0.0)
    lo = np.floor(coord).astype(np.int64)
    edge = lo >= size - 1
    lo = np.where(edge, size - 1, lo)
    hi = np.where(edge, size - 1, lo + 1)
    frac = np.where(edge, 0.0, coord - lo)
    out = np.zeros((bins * SAMPLES, size))
    rows = np.arange(bins * SAMPLES)
    np.add.at(out, (rows, lo), np.where(valid, 1.0 - frac, 0.0))
    np.add.at(out, (rows, hi), np.where(valid, frac, 0.0))
    return out.reshape(bins, SAMPLES, size).mean(axis=1)


def sampling_matrix(box, feat_h: int, feat_w: int, out_h: int, out_w: int) -> np.ndarray:
    """[out_h*out_w, feat_h*feat_w] matrix M with ``roi = M @ feat.flatten()``.

    Bilinear interpolation is separable and the 2x2 sample grid is a product
    grid, so each output weight factors into a row weight times a column
    weight.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if (x2 - x1) * (y2 - y1) < 1e-6 or x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate RoI box {(x1, y1, x2, y2)}")
    wy = _axis_weights(y1, y2 - y1, out_h, feat_h)
    wx = _axis_weights(x1, x2 - x1, out_w, feat_w)
    return np.einsum("ai,bj->abij", wy, wx).reshape(out_h * out_w, feat_h * feat_w)


def roi_align(featmap: Tensor, boxes, out_size: int = 14, batch_index=None) -> Tensor:
    """Pool ``boxes`` ([N,4] or one box) from ``featmap`` ([C,Hf,Wf] or
    [B,C,Hf,Wf]) into [N,C,out,out]. A single box on a single map returns
    [C,out,out]. Differentiable with respect to the feature map."""
    featmap = as_tensor(featmap)
    single_box = np.ndim(boxes) == 1 or (not isinstance(boxes, np.ndarray) and hasattr(boxes, "x1"))
    boxes = np.asarray(tuple(boxes) if single_box else boxes, dtype=np.float64).reshape(-1, 4)
    single_map = featmap.ndim == 3
    fm = featmap.reshape((1,) + featmap.shape) if single_map else featmap
    b, c, hf, wf = fm.shape
    n = len(boxes)
    if batch_index is None:
        batch_index = np.zeros(n, dtype=np.int64)
    mats = np.stack([sampling_matrix(bx, hf, wf, out_size, out_size).T for bx in boxes]) if n else \
        np.zeros((0, hf * wf, out_size * out_size))
    flat = fm.reshape(b, c, hf * wf)
    gathered = getitem(flat, np.asarray(batch_index, dtype=np.int64))
    pooled = matmul(gathered, Tensor(mats, dtype=fm.data.dtype)).reshape(n, c, out_size, out_size)
    if single_box and single_map:
        return pooled.reshape(pooled.shape[1:])
    return pooled
