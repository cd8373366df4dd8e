"""Training loop and test-split evaluation for the search model."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import GroundTruth, MetricsReport, QueryCase, detection_metrics, evaluate, gallery_sweep
from .model import ModelConfig, NonFiniteLoss, PersonSearchModel, SceneBatch, jittered_proposals, total_loss
from .optim import Sgd, SgdConfig
from .synth import Scene, Splits
from .tensor import no_grad

log = logging.getLogger(__name__)

EVAL_CHUNK = 5


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict[str, float]
    total: float
    seconds: float


@dataclass
class EvalArtifacts:
    report: MetricsReport
    gallery_dets: dict
    query_embeddings: list[np.ndarray]
    gts: dict[int, GroundTruth]
    cases: list[QueryCase] = field(default_factory=list)


def build_model(model_config: ModelConfig, num_identities: int, seed: int) -> PersonSearchModel:
    return PersonSearchModel(model_config, np.random.default_rng([seed, 1]), num_identities)


def _batch(scenes: Sequence[Scene]) -> SceneBatch:
    return SceneBatch(np.stack([s.image for s in scenes]),
                      [s.boxes for s in scenes], [s.identities for s in scenes])


def _proposals(model: PersonSearchModel, scenes: Sequence[Scene], rng: np.random.Generator) -> list[np.ndarray]:
    cfg = model.config
    out = []
    for s in scenes:
        _, h, w = s.image.shape
        out.append(jittered_proposals(s.boxes, rng, w, h, cfg.proposals_per_gt,
                                      cfg.background_proposals, cfg.proposal_jitter))
    return out


def train_model(model: PersonSearchModel, scenes: Sequence[Scene], sgd: SgdConfig, epochs: int,
                batch_size: int, seed: int,
                on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """SGD over shuffled batches of scenes. Raises ``NonFiniteLoss`` naming
    the offending term if any loss stops being finite."""
    opt = Sgd(model.parameters(), sgd)
    rng = np.random.default_rng([seed, 2])
    steps = max(1, int(np.ceil(len(scenes) / batch_size)))
    history = []
    model.train()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(scenes))
        sums: dict[str, float] = {}
        lr = 0.0
        for step in range(steps):
            chunk = [scenes[i] for i in order[step * batch_size:(step + 1) * batch_size]]
            if not chunk:
                continue
            terms = model.losses(_batch(chunk), _proposals(model, chunk, rng))
            try:
                loss = total_loss(terms)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(exc.term, exc.value, epoch, step) from None
            opt.zero_grad()
            loss.backward()
            lr = opt.step(epoch + step / steps)
            for name, value in terms.items():
                sums[name] = sums.get(name, 0.0) + float(value.data)
        losses = {k: v / steps for k, v in sorted(sums.items())}
        entry = EpochLog(epoch, lr, losses, sum(losses.values()), time.perf_counter() - t0)
        log.info("epoch %d loss %.4f (%.1fs)", epoch, entry.total, entry.seconds)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    model.eval()
    return history


def initial_loss(model: PersonSearchModel, scenes: Sequence[Scene], batch_size: int, seed: int) -> float:
    """Mean total loss over the training scenes without updating anything."""
    rng = np.random.default_rng([seed, 2])
    model.train()
    totals = []
    lut = model.oim.lookup_table.copy()
    bn = [b.copy() for _, b in model.named_buffers()]
    with no_grad():
        for i in range(0, len(scenes), batch_size):
            chunk = list(scenes[i:i + batch_size])
            terms = model.losses(_batch(chunk), _proposals(model, chunk, rng), update_oim=False)
            totals.append(float(total_loss(terms).data))
    for (_, buf), saved in zip(model.named_buffers(), bn):
        np.copyto(buf, saved)
    np.copyto(model.oim.lookup_table, lut)
    model.eval()
    return float(np.mean(totals))


def run_inference(model: PersonSearchModel, splits: Splits, seed: int) -> tuple[dict, list[np.ndarray], dict]:
    """Gallery detections per test scene and one embedding per query."""
    model.eval()
    cfg = model.config
    gallery, gts = {}, {}
    by_id = {s.scene_id: s for s in splits.test}
    with no_grad():
        for i in range(0, len(splits.test), EVAL_CHUNK):
            chunk = splits.test[i:i + EVAL_CHUNK]
            props = [jittered_proposals(s.boxes, np.random.default_rng([seed, 31337, s.scene_id]),
                                        s.image.shape[2], s.image.shape[1], cfg.proposals_per_gt,
                                        cfg.background_proposals, cfg.proposal_jitter) for s in chunk]
            out = model.search_forward(np.stack([s.image for s in chunk]), props)
            for s, dets in zip(chunk, out.detections):
                gallery[s.scene_id] = dets
                gts[s.scene_id] = GroundTruth(s.boxes, s.identities)
        queries = []
        for case in splits.query_cases:
            scene = by_id[case.query_scene]
            emb = model.embed_boxes(scene.image[None], np.array([tuple(case.query_box)]), np.zeros(1, np.int64))
            queries.append(emb[0])
    return gallery, queries, gts


def evaluate_model(model: PersonSearchModel, splits: Splits, seed: int,
                   sweep_sizes: Sequence[int] | None = None) -> tuple[EvalArtifacts, list[MetricsReport]]:
    gallery, queries, gts = run_inference(model, splits, seed)
    thresh = model.config.gallery_score_thresh
    # re-id ranking sees confident detections only; detection metrics see all
    reid_gallery = {sid: [d for d in dets if d.det_score >= thresh] for sid, dets in gallery.items()}
    report = evaluate(splits.query_cases, reid_gallery, queries, gts, seed)
    all_dets = [d for sid in sorted(gallery) for d in gallery[sid]]
    all_gts = [(tuple(b), int(i), sid) for sid in sorted(gts) for b, i in zip(gts[sid].boxes, gts[sid].identities)]
    report.det_recall, report.det_ap = detection_metrics(all_dets, all_gts)
    sweep = gallery_sweep(splits.query_cases, sweep_sizes, reid_gallery, queries, gts, seed) if sweep_sizes else []
    return EvalArtifacts(report, gallery, queries, gts, list(splits.query_cases)), sweep


def train_and_evaluate(model_config: ModelConfig, splits: Splits, sgd: SgdConfig, epochs: int,
                       batch_size: int, seed: int, num_identities: int,
                       on_epoch: Callable[[EpochLog], None] | None = None):
    """Fresh model -> training -> test-split evaluation."""
    model = build_model(model_config, num_identities, seed)
    history = train_model(model, splits.train, sgd, epochs, batch_size, seed, on_epoch)
    artifacts, _ = evaluate_model(model, splits, seed)
    return model, history, artifacts
