"""Two-branch person-search model at desk scale.

backbone (3 stride-2 conv blocks) -> feature map (stride 8)
detection branch: RoIAlign -> ARM(det) -> res5 conv -> pool -> class logits, box deltas
re-id branch:     RoIAlign on branch-1 boxes -> ARM(reid) -> res5 conv -> pool
                  -> box deltas + norm-aware embedding (norm -> person score,
                  direction -> re-id vector)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .arm import ArmBlock, ArmConfig
from .boxes import NMS_IOU, Box, Detection, Targets, assign_targets, clip_boxes, decode, nms_indices
from .nn import BatchNorm1d, Conv2d, Linear, Module
from .oim import OimState, oim_loss
from .roi import roi_align
from .tensor import Tensor

STRIDE = 8


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float, epoch: int | None = None, step: int | None = None):
        where = f" at epoch {epoch} step {step}" if epoch is not None else ""
        super().__init__(f"non-finite {term} loss ({value}){where}")
        self.term = term
        self.value = value
        self.epoch = epoch
        self.step = step


@dataclass
class ModelConfig:
    arm: ArmConfig = field(default_factory=lambda: ArmConfig(channels_in=32))
    variant: str = "full_arm"
    embed_dim: int = 128
    backbone_widths: tuple[int, int] = (16, 32)
    proposals_per_gt: int = 8
    background_proposals: int = 8
    proposal_jitter: float = 0.2
    oim_momentum: float = 0.5
    oim_temperature: float = 1.0 / 30
    oim_queue: int = 64
    gallery_score_thresh: float = 0.5
    nms_iou: float = NMS_IOU


class Backbone(Module):
    def __init__(self, channels: int, widths: tuple[int, int], rng: np.random.Generator):
        self.conv1 = Conv2d(3, widths[0], 3, rng, stride=2)
        self.conv2 = Conv2d(widths[0], widths[1], 3, rng, stride=2)
        self.conv3 = Conv2d(widths[1], channels, 3, rng, stride=2)

    def __call__(self, images: Tensor) -> Tensor:
        x = F.relu(self.conv1(images - 0.5))
        x = F.relu(self.conv2(x))
        return F.relu(self.conv3(x))


class Branch(Module):
    """RoIAlign features -> ARM -> res5 stand-in -> pooled vector."""

    def __init__(self, arm_config: ArmConfig, variant: str, rng: np.random.Generator):
        self.arm = ArmBlock(arm_config, rng, variant)
        c = arm_config.channels_in
        self.res5 = Conv2d(c, c, 3, rng, stride=2)

    def __call__(self, roi_feats: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = self.arm(roi_feats, rng)
        x = F.relu(self.res5(x))
        return x.mean(axis=(2, 3))


class DetectionBranch(Branch):
    def __init__(self, arm_config, variant, rng):
        super().__init__(arm_config, variant, rng)
        self.cls = Linear(arm_config.channels_in, 2, rng)
        self.box = Linear(arm_config.channels_in, 4, rng)


class NaeHead(Module):
    """Norm-aware embedding: ``r = fc(pooled)``; the direction of ``r`` is the
    re-id feature and its batch-normalized norm the person logit."""

    def __init__(self, channels: int, dim: int, rng: np.random.Generator):
        self.embed = Linear(channels, dim, rng)
        self.bn = BatchNorm1d(1)
        self.degenerate_count = 0
        self.dim = dim

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        return self.from_projection(self.embed(pooled))

    def from_projection(self, r: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(person_logit [N], unit embedding [N, dim])``."""
        norm = (r * r).sum(axis=1, keepdims=True).sqrt()
        small = norm.data[:, 0] < 1e-8
        if small.any():
            # fall back to the first basis vector for vanishing projections
            self.degenerate_count += int(small.sum())
            keep = (~small[:, None]).astype(r.data.dtype)
            basis = np.zeros(r.shape, dtype=r.data.dtype)
            basis[small, 0] = 1.0
            emb = r / (norm + (1.0 - keep)) * keep + basis
        else:
            emb = r / norm
        logit = self.bn(norm) if r.shape[0] else norm
        return logit.reshape(-1), emb


class ReidBranch(Branch):
    def __init__(self, arm_config, variant, rng, embed_dim: int):
        super().__init__(arm_config, variant, rng)
        self.box = Linear(arm_config.channels_in, 4, rng)
        self.nae = NaeHead(arm_config.channels_in, embed_dim, rng)


@dataclass
class SceneBatch:
    images: np.ndarray                 # [B,3,H,W]
    gt_boxes: list[np.ndarray]         # per scene [K,4] image pixels
    gt_ids: list[np.ndarray]


@dataclass
class BranchOutput:
    boxes_in: np.ndarray               # [N,4] image pixels
    batch_index: np.ndarray
    deltas: Tensor
    logits: Tensor | None = None       # det branch: [N,2]; reid branch: [N]
    embeddings: Tensor | None = None

    def decoded(self, width: float, height: float) -> np.ndarray:
        return clip_boxes(decode(self.boxes_in, self.deltas.data.astype(np.float64)), width, height)


@dataclass
class SearchOutput:
    det: BranchOutput
    reid: BranchOutput | None
    detections: list[list[Detection]] = field(default_factory=list)


class PersonSearchModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, num_identities: int):
        self.config = config
        c = config.arm.channels_in
        self.backbone = Backbone(c, config.backbone_widths, rng)
        self.det = DetectionBranch(config.arm, config.variant, rng)
        self.reid = ReidBranch(config.arm, config.variant, rng, config.embed_dim)
        self.assign_names()
        self.oim = OimState(num_identities, config.embed_dim, config.oim_queue,
                            config.oim_momentum, config.oim_temperature)
        self.dropout_rng = np.random.default_rng(int(rng.integers(2**63)))

    def named_buffers(self, prefix: str = ""):
        yield from super().named_buffers(prefix)
        yield f"{prefix}oim.lookup_table", self.oim.lookup_table

    # -- branches ---------------------------------------------------------
    def features(self, images: np.ndarray) -> Tensor:
        return self.backbone(Tensor(images))

    def _pool(self, feats: Tensor, boxes: np.ndarray, batch_index: np.ndarray) -> Tensor:
        return roi_align(feats, boxes / STRIDE, self.config.arm.roi_size, batch_index)

    def run_det(self, feats: Tensor, boxes: np.ndarray, batch_index: np.ndarray) -> BranchOutput:
        pooled = self.det(self._pool(feats, boxes, batch_index), self.dropout_rng)
        return BranchOutput(boxes, batch_index, self.det.box(pooled), self.det.cls(pooled))

    def run_reid(self, feats: Tensor, boxes: np.ndarray, batch_index: np.ndarray) -> BranchOutput:
        pooled = self.reid(self._pool(feats, boxes, batch_index), self.dropout_rng)
        logit, emb = self.reid.nae(pooled)
        return BranchOutput(boxes, batch_index, self.reid.box(pooled), logit, emb)

    # -- training ---------------------------------------------------------
    def losses(self, batch: SceneBatch, proposals: list[np.ndarray],
               reid_boxes: list[np.ndarray] | None = None, update_oim: bool = True) -> dict[str, Tensor]:
        """Detection (cls, reg) and re-id branch (reg, cls, oim) losses.

        ``reid_boxes`` overrides the branch-2 input boxes (normally the
        detached branch-1 decodes); gradient checks pass them in fixed.
        """
        _, _, h, w = batch.images.shape
        feats = self.features(batch.images)
        boxes = np.concatenate(proposals)
        bidx = np.concatenate([np.full(len(p), i) for i, p in enumerate(proposals)])
        det = self.run_det(feats, boxes, bidx)
        t1 = self._targets(boxes, bidx, batch)
        out = detection_losses(det.deltas, det.logits, t1)

        if reid_boxes is None:
            boxes2 = det.decoded(w, h)
            if not np.isfinite(boxes2).all():
                raise NonFiniteLoss("det_reg", float(out["det_reg"].data))
        else:
            boxes2 = np.concatenate(reid_boxes)
        reid = self.run_reid(feats, boxes2, bidx)
        t2 = self._targets(boxes2, bidx, batch)
        fg = t2.labels == 1
        out["reid_reg"] = _reg_loss(reid.deltas, t2.regression, fg)
        out["reid_cls"] = F.binary_cross_entropy_with_logits(reid.logits, t2.labels)
        fg_idx = np.flatnonzero(fg)
        out["reid_oim"] = oim_loss(reid.embeddings[fg_idx], t2.identities[fg_idx], self.oim, update=update_oim)
        return out

    def _targets(self, boxes, bidx, batch: SceneBatch):
        labels, reg, ids = [], [], []
        for i in range(len(batch.gt_boxes)):
            sel = bidx == i
            t = assign_targets(boxes[sel], batch.gt_boxes[i], batch.gt_ids[i])
            labels.append(t.labels)
            reg.append(t.regression)
            ids.append(t.identities)
        lab = np.concatenate(labels)
        return Targets(lab, np.full(len(lab), -1), np.concatenate(reg), np.concatenate(ids), np.zeros(len(lab)))

    # -- inference --------------------------------------------------------
    def search_forward(self, images: np.ndarray, proposals: list[np.ndarray]) -> SearchOutput:
        """Eval-mode search: branch-1 boxes are scored, NMS'd, then refined
        and embedded by branch 2."""
        _, _, h, w = images.shape
        feats = self.features(images)
        results: list[list[Detection]] = [[] for _ in proposals]
        sizes = [len(p) for p in proposals]
        if sum(sizes) == 0:
            return SearchOutput(BranchOutput(np.zeros((0, 4)), np.zeros(0, int), Tensor(np.zeros((0, 4)))), None, results)
        boxes = np.concatenate([p for p in proposals if len(p)])
        bidx = np.concatenate([np.full(n, i) for i, n in enumerate(sizes)])
        det = self.run_det(feats, boxes, bidx)
        probs = _softmax(det.logits.data)[:, 1]
        decoded = det.decoded(w, h)
        keep_boxes, keep_bidx = [], []
        for i in range(len(proposals)):
            sel = np.flatnonzero(bidx == i)
            if len(sel) == 0:
                continue
            kept = sel[nms_indices(decoded[sel], probs[sel], self.config.nms_iou)]
            keep_boxes.append(decoded[kept])
            keep_bidx.append(np.full(len(kept), i))
        boxes2 = np.concatenate(keep_boxes)
        bidx2 = np.concatenate(keep_bidx)
        reid = self.run_reid(feats, boxes2, bidx2)
        final = reid.decoded(w, h)
        scores = _sigmoid(reid.logits.data)
        emb = reid.embeddings.data
        for k in range(len(final)):
            results[int(bidx2[k])].append(Detection(Box(*final[k]), float(scores[k]), emb[k].astype(np.float64)))
        return SearchOutput(det, reid, results)

    def embed_boxes(self, images: np.ndarray, boxes: np.ndarray, batch_index: np.ndarray) -> np.ndarray:
        """Re-id embeddings of given boxes (query path)."""
        feats = self.features(images)
        return self.run_reid(feats, boxes, batch_index).embeddings.data.astype(np.float64)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _reg_loss(deltas: Tensor, targets: np.ndarray, fg: np.ndarray) -> Tensor:
    idx = np.flatnonzero(fg)
    if len(idx) == 0:
        return (deltas * 0.0).sum()
    return F.smooth_l1(deltas[idx], targets[idx], beta=1.0).sum() * (1.0 / len(idx))


def detection_losses(pred_deltas: Tensor, pred_logits: Tensor, targets) -> dict[str, Tensor]:
    """Smooth-L1 (beta 1) over foreground deltas, summed over coordinates and
    averaged over the foreground count; fg/bg cross-entropy averaged over all
    proposals."""
    fg = np.asarray(targets.labels) == 1
    return {"det_reg": _reg_loss(pred_deltas, np.asarray(targets.regression), fg),
            "det_cls": F.cross_entropy(pred_logits, targets.labels)}


def total_loss(terms: dict[str, Tensor]) -> Tensor:
    total = None
    for name in sorted(terms):
        value = float(terms[name].data)
        if not np.isfinite(value):
            raise NonFiniteLoss(name, value)
        total = terms[name] if total is None else total + terms[name]
    return total


# ---------------------------------------------------------------------------
# proposals (stand-in for an RPN)
# ---------------------------------------------------------------------------

def jittered_proposals(gt_boxes: np.ndarray, rng: np.random.Generator, width: int, height: int,
                       per_gt: int = 8, background: int = 8, jitter: float = 0.2) -> np.ndarray:
    """``per_gt`` boxes per GT with every edge moved by up to ``jitter`` of
    the box size, plus ``background`` random person-sized boxes."""
    out = []
    for x1, y1, x2, y2 in gt_boxes:
        bw, bh = x2 - x1, y2 - y1
        d = rng.uniform(-jitter, jitter, size=(per_gt, 4)) * np.array([bw, bh, bw, bh])
        out.append(np.array([x1, y1, x2, y2]) + d)
    bh = rng.uniform(20, 48, size=background)
    bw = bh * rng.uniform(0.3, 0.8, size=background)
    bx = rng.uniform(0, 1, size=background) * (width - bw)
    by = rng.uniform(0, 1, size=background) * (height - bh)
    out.append(np.stack([bx, by, bx + bw, by + bh], axis=1))
    return clip_boxes(np.concatenate(out).reshape(-1, 4), width, height, min_size=2.0)


__all__ = ["ModelConfig", "PersonSearchModel", "SceneBatch", "SearchOutput", "NonFiniteLoss",
           "detection_losses", "jittered_proposals", "total_loss"]
