"""Box geometry: IoU, greedy NMS, proposal/GT assignment and the
center-size delta encoding used by both regression heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

FG_IOU = 0.5
NMS_IOU = 0.4
_MAX_LOG_RATIO = np.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array(tuple(self), dtype=np.float64)

    def scaled(self, factor: float) -> "Box":
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass
class Detection:
    box: Box
    det_score: float
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))
    identity: int | None = None
    scene_id: int = -1


def as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    arr = np.array([tuple(b) for b in boxes], dtype=np.float64) if len(boxes) else np.zeros((0, 4))
    return arr.reshape(-1, 4)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix of [N,4] and [M,4] arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float = NMS_IOU) -> np.ndarray:
    """Indices kept by greedy NMS, in descending score order (stable on ties)."""
    if not 0 < threshold < 1:
        raise ValueError(f"NMS threshold must lie in (0,1), got {threshold}")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    overlaps = box_iou(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > threshold
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], threshold: float = NMS_IOU) -> list[Detection]:
    if not dets:
        return []
    keep = nms_indices(as_boxes([d.box for d in dets]), np.array([d.det_score for d in dets]), threshold)
    return [dets[i] for i in keep]


def encode(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Deltas (dx/w, dy/h, log(gw/w), log(gh/h)) taking proposals to gts."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = gts[:, 0] + 0.5 * gw
    gy = gts[:, 1] + 0.5 * gh
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


def decode(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    dw = np.clip(deltas[:, 2], -_MAX_LOG_RATIO, _MAX_LOG_RATIO)
    dh = np.clip(deltas[:, 3], -_MAX_LOG_RATIO, _MAX_LOG_RATIO)
    cx = px + deltas[:, 0] * pw
    cy = py + deltas[:, 1] * ph
    w = pw * np.exp(dw)
    h = ph * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip to the canvas and enforce a minimum side so boxes stay valid."""
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        short = out[:, hi] - out[:, lo] < min_size
        out[short, lo] = np.clip(out[short, lo], 0, limit - min_size)
        out[short, hi] = out[short, lo] + min_size
    return out


class Targets(NamedTuple):
    labels: np.ndarray            # 1 foreground, 0 background
    matched_gt: np.ndarray        # index into gts, -1 when background
    regression: np.ndarray        # [P,4] deltas, zeros for background
    identities: np.ndarray        # identity of matched gt, -1 for background
    max_iou: np.ndarray


def assign_targets(proposals, gts, identities=None, fg_iou: float = FG_IOU) -> Targets:
    """Label each proposal foreground iff its best IoU with a GT is >= fg_iou;
    ties go to the lowest-index GT."""
    proposals = as_boxes(proposals) if not isinstance(proposals, np.ndarray) else proposals.reshape(-1, 4)
    gts = as_boxes(gts) if not isinstance(gts, np.ndarray) else gts.reshape(-1, 4)
    p = len(proposals)
    ids = np.full(len(gts), -1) if identities is None else np.asarray(identities, dtype=np.int64)
    if len(gts) == 0:
        return Targets(np.zeros(p, np.int64), np.full(p, -1), np.zeros((p, 4)), np.full(p, -1), np.zeros(p))
    overlaps = box_iou(proposals, gts)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(p), best]
    fg = best_iou >= fg_iou
    matched = np.where(fg, best, -1)
    reg = np.zeros((p, 4))
    if fg.any():
        reg[fg] = encode(proposals[fg], gts[best[fg]])
    return Targets(fg.astype(np.int64), matched, reg, np.where(fg, ids[best], -1), best_iou)
