"""Person-search evaluation: per-query AP over gallery detections, mAP,
top-1, class-agnostic detection recall/AP and gallery-size sweeps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .arm import UsageError
from .boxes import Box, Detection, iou

MATCH_IOU = 0.5


@dataclass
class QueryCase:
    query_scene: int
    query_box: Box
    query_identity: int
    gallery: list[int]

    def __post_init__(self):
        if not self.gallery:
            raise ValueError("a query needs a nonempty gallery")


@dataclass
class MetricsReport:
    map: float
    top1: float
    det_recall: float
    det_ap: float
    per_query_ap: list[float] = field(default_factory=list)
    gallery_size: int = 0
    seed: int = 0
    excluded_queries: int = 0

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_query_ap"] = [float(v) for v in self.per_query_ap]
        return out


@dataclass
class GroundTruth:
    """Annotations of one scene in the same units as its detections."""
    boxes: np.ndarray
    identities: np.ndarray


def _sim_order(dets: Sequence[Detection], query_embedding: np.ndarray) -> list[int]:
    """Indices by descending cosine similarity; ties by (scene id, index)."""
    q = np.asarray(query_embedding, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    sims = []
    for d in dets:
        e = np.asarray(d.embedding, dtype=np.float64)
        sims.append(float(e @ q) / max(np.linalg.norm(e), 1e-12))
    return sorted(range(len(dets)), key=lambda i: (-sims[i], dets[i].scene_id, i))


def match_detections(dets: Sequence[Detection], gts, identity: int | None = None,
                     iou_thr: float = MATCH_IOU) -> np.ndarray:
    """Greedy one-to-one matching in the given detection order.

    ``gts`` is a list of ``(Box, identity)`` or ``(Box, identity, scene_id)``;
    without a scene id a GT matches detections from any scene. With
    ``identity`` set only GTs of that identity can be matched. Each detection
    claims the unmatched eligible GT it overlaps most, if that IoU >= iou_thr.
    """
    flags = np.zeros(len(dets), dtype=bool)
    used = [False] * len(gts)
    for k, det in enumerate(dets):
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts):
            if used[g] or (identity is not None and gt[1] != identity):
                continue
            if len(gt) > 2 and gt[2] != det.scene_id:
                continue
            ov = iou(tuple(det.box), tuple(gt[0]))
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = g, ov
        if best >= 0:
            used[best] = True
            flags[k] = True
    return flags


def _ap_from_flags(flags: np.ndarray, num_gt: int) -> float:
    """Sum of precision(k) * delta-recall(k) over the ranked list."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return float(np.sum((tp / ranks)[flags]) / num_gt)


def _gallery_gts(case: QueryCase, gts: Mapping[int, GroundTruth]) -> list[tuple]:
    out = []
    for sid in case.gallery:
        gt = gts[sid]
        for box, ident in zip(gt.boxes, gt.identities):
            if int(ident) == case.query_identity:
                out.append((tuple(box), int(ident), sid))
    return out


def _gallery_detections(case: QueryCase, gallery_dets: Mapping[int, Sequence[Detection]]) -> list[Detection]:
    dets = []
    for sid in sorted(case.gallery):
        for d in gallery_dets.get(sid, ()):
            d.scene_id = sid
            dets.append(d)
    return dets


def query_ap(case: QueryCase, gallery_dets: Mapping[int, Sequence[Detection]],
             query_embedding: np.ndarray, gts: Mapping[int, GroundTruth]) -> float | None:
    """AP of one query, or None when its identity is absent from the gallery."""
    targets = _gallery_gts(case, gts)
    if not targets:
        return None
    dets = _gallery_detections(case, gallery_dets)
    ranked = [dets[i] for i in _sim_order(dets, query_embedding)]
    flags = match_detections(ranked, targets, case.query_identity)
    return _ap_from_flags(flags, len(targets))


def top1(case: QueryCase, gallery_dets: Mapping[int, Sequence[Detection]],
         query_embedding: np.ndarray, gts: Mapping[int, GroundTruth]) -> int:
    dets = _gallery_detections(case, gallery_dets)
    if not dets:
        return 0
    first = dets[_sim_order(dets, query_embedding)[0]]
    targets = _gallery_gts(case, gts)
    return int(match_detections([first], targets, case.query_identity)[0])


def detection_metrics(all_dets: Sequence[Detection], all_gts: Sequence[tuple],
                      iou_thr: float = MATCH_IOU) -> tuple[float, float]:
    """Class-agnostic (recall, AP). ``all_gts`` holds ``(Box, identity,
    scene_id)`` tuples; detections carry ``scene_id``."""
    if not all_dets or not all_gts:
        return 0.0, 0.0
    order = sorted(range(len(all_dets)), key=lambda i: (-all_dets[i].det_score, all_dets[i].scene_id, i))
    ranked = [all_dets[i] for i in order]
    by_scene: dict[int, list[int]] = {}
    for g, gt in enumerate(all_gts):
        by_scene.setdefault(gt[2], []).append(g)
    flags = np.zeros(len(ranked), dtype=bool)
    used = np.zeros(len(all_gts), dtype=bool)
    for k, det in enumerate(ranked):
        best, best_iou = -1, iou_thr
        for g in by_scene.get(det.scene_id, ()):
            if used[g]:
                continue
            ov = iou(tuple(det.box), tuple(all_gts[g][0]))
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = g, ov
        if best >= 0:
            used[best] = True
            flags[k] = True
    return float(used.sum() / len(all_gts)), _ap_from_flags(flags, len(all_gts))


def evaluate(cases: Sequence[QueryCase], gallery_dets: Mapping[int, Sequence[Detection]],
             query_embeddings: Sequence[np.ndarray], gts: Mapping[int, GroundTruth],
             seed: int = 0, gallery_size: int | None = None) -> MetricsReport:
    aps, hits, excluded = [], [], 0
    for case, q in zip(cases, query_embeddings):
        ap = query_ap(case, gallery_dets, q, gts)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        hits.append(top1(case, gallery_dets, q, gts))
    all_dets = [d for sid in sorted(gallery_dets) for d in _tag(gallery_dets[sid], sid)]
    all_gts = [(tuple(b), int(i), sid) for sid in sorted(gallery_dets)
               for b, i in zip(gts[sid].boxes, gts[sid].identities)]
    recall, det_ap = detection_metrics(all_dets, all_gts)
    size = gallery_size if gallery_size is not None else max((len(c.gallery) for c in cases), default=0)
    return MetricsReport(float(np.mean(aps)) if aps else 0.0, float(np.mean(hits)) if hits else 0.0,
                         recall, det_ap, aps, size, seed, excluded)


def _tag(dets: Sequence[Detection], sid: int) -> Sequence[Detection]:
    for d in dets:
        d.scene_id = sid
    return dets


def truncate_gallery(case: QueryCase, size: int, gts: Mapping[int, GroundTruth],
                     rng: np.random.Generator) -> QueryCase:
    """Keep scenes holding the query identity first, then fill with a seeded
    sample of the remaining scenes; order follows the original gallery."""
    if size >= len(case.gallery):
        return case
    positives = [s for s in case.gallery if case.query_identity in gts[s].identities]
    negatives = [s for s in case.gallery if s not in positives]
    if len(positives) > size:
        chosen = set(rng.choice(positives, size, replace=False).tolist())
    else:
        extra = rng.choice(negatives, size - len(positives), replace=False).tolist() if size > len(positives) else []
        chosen = set(positives) | set(extra)
    return QueryCase(case.query_scene, case.query_box, case.query_identity,
                     [s for s in case.gallery if s in chosen])


def gallery_sweep(cases: Sequence[QueryCase], sizes: Sequence[int],
                  gallery_dets: Mapping[int, Sequence[Detection]],
                  query_embeddings: Sequence[np.ndarray], gts: Mapping[int, GroundTruth],
                  seed: int = 0) -> list[MetricsReport]:
    if not sizes:
        raise UsageError("gallery_sweep needs at least one size")
    available = max(len(c.gallery) for c in cases) if cases else 0
    reports = []
    for size in sizes:
        if size <= 0:
            raise UsageError(f"gallery size must be positive, got {size}")
        if size > available:
            raise UsageError(f"gallery size {size} exceeds the {available} available scenes")
        rng = np.random.default_rng([seed, size])
        trimmed = [truncate_gallery(c, size, gts, rng) for c in cases]
        reports.append(evaluate(trimmed, gallery_dets, query_embeddings, gts, seed, size))
    return reports
