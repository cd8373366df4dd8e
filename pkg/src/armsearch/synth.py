"""Deterministic synthetic person-search scenes.

A "person" is a head / torso / legs figure whose torso and leg colours plus a
stripe pattern come from its identity signature. Identities are generated in
pairs that share a palette but swap torso and leg colours, so telling them
apart needs the vertical arrangement inside the box and not just its colour
statistics. Scenes add background noise, distractor patches and optional
occluders; annotations always store the full, unoccluded box.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box, box_iou

PALETTE = np.array([
    [0.85, 0.15, 0.15],  # red
    [0.15, 0.35, 0.85],  # blue
    [0.15, 0.70, 0.25],  # green
    [0.90, 0.80, 0.15],  # yellow
    [0.60, 0.20, 0.70],  # purple
    [0.95, 0.55, 0.10],  # orange
    [0.10, 0.75, 0.80],  # cyan
    [0.95, 0.95, 0.95],  # white
])
SKIN = np.array([0.90, 0.70, 0.55])
BASE_HEIGHT = 36.0
ASPECT = 0.42
SIGNATURE_DIM = 12


@dataclass
class SynthConfig:
    num_identities: int = 20
    scenes_train: int = 200
    scenes_test: int = 50
    canvas_h: int = 96
    canvas_w: int = 96
    channels: int = 3
    persons_min: int = 1
    persons_max: int = 4
    occlusion_prob: float = 0.3
    jitter_scale: float = 0.15
    distractor_count: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_prob", "jitter_scale"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.canvas_h % 8 or self.canvas_w % 8:
            raise ValueError("canvas sides must be divisible by the backbone stride 8")
        if not 1 <= self.persons_min <= self.persons_max:
            raise ValueError("need 1 <= persons_min <= persons_max")
        if self.persons_max > self.num_identities:
            raise ValueError("persons_max cannot exceed num_identities")
        if self.channels != 3:
            raise ValueError("scenes are rendered in RGB")


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray                      # [3, H, W] float32
    boxes: np.ndarray                      # [K, 4] image pixels
    identities: np.ndarray                 # [K]

    @property
    def annotations(self) -> list[tuple[Box, int]]:
        return [(Box(*b), int(i)) for b, i in zip(self.boxes, self.identities)]


@dataclass
class Splits:
    train: list[Scene]
    test: list[Scene]
    query_cases: list = field(default_factory=list)
    excluded_identities: list[int] = field(default_factory=list)


def dataset_checksum(splits: Splits) -> str:
    """Digest of every scene's pixels and annotations plus the query list."""
    h = hashlib.blake2b(digest_size=8)
    for scene in list(splits.train) + list(splits.test):
        h.update(np.int64(scene.scene_id).tobytes())
        h.update(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(scene.boxes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(scene.identities, dtype="<i8").tobytes())
    for case in splits.query_cases:
        h.update(repr((case.query_scene, tuple(case.query_box), case.query_identity, tuple(case.gallery))).encode())
    return h.hexdigest()


def identity_hash(identity: int, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{identity}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _palette_pairs(seed: int) -> list[tuple[int, int, int, int]]:
    """All (colour a, colour b, stripe colour, stripe orientation) combos with
    a < b, in a seed-dependent order."""
    combos = [(a, b, s, o)
              for a in range(len(PALETTE)) for b in range(a + 1, len(PALETTE))
              for s in range(len(PALETTE)) if s not in (a, b)
              for o in (0, 1, 2)]
    order = np.random.default_rng([seed, 7919]).permutation(len(combos))
    return [combos[i] for i in order]


def identity_signature(identity: int, seed: int) -> np.ndarray:
    """Appearance vector: torso rgb, legs rgb, stripe rgb, stripe period,
    stripe orientation (0 none, 1 horizontal, 2 vertical), torso fraction."""
    pair, member = divmod(identity, 2)
    a, b, s, orient = _palette_pairs(seed)[pair]
    top, bottom = (a, b) if member == 0 else (b, a)
    rng = np.random.default_rng(identity_hash(identity, seed))
    shade = rng.uniform(-0.05, 0.05, size=9)
    colours = np.concatenate([PALETTE[top], PALETTE[bottom], PALETTE[s]]) + shade
    period = 3.0 + float(rng.integers(0, 3))
    torso = 0.40 + 0.05 * float(rng.random())
    return np.concatenate([np.clip(colours, 0, 1), [period, float(orient), torso]])


def render_person(signature: np.ndarray, h: int, w: int, brightness: float = 1.0,
                  split_shift: float = 0.0, leg_shift: int = 0) -> np.ndarray:
    """RGBA-free person patch [3, h, w]; zeros where the background shows."""
    top, bottom, stripe = signature[0:3], signature[3:6], signature[6:9]
    period, orient, torso_frac = int(signature[9]), int(signature[10]), signature[11]
    patch = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)
    head_h = max(2, int(round(0.18 * h)))
    torso_end = int(round(h * (0.18 + torso_frac + split_shift)))
    torso_end = min(max(torso_end, head_h + 2), h - 2)
    hx0, hx1 = int(round(0.28 * w)), int(round(0.72 * w))
    patch[:, :head_h, hx0:hx1] = SKIN[:, None, None]
    mask[:head_h, hx0:hx1] = True
    patch[:, head_h:torso_end, :] = top[:, None, None]
    mask[head_h:torso_end, :] = True
    rows = np.arange(head_h, torso_end)
    cols = np.arange(w)
    if orient == 1:
        sel = rows[(rows - head_h) % period == 0]
        patch[:, sel, :] = stripe[:, None, None]
    elif orient == 2:
        sel = cols[cols % period == 0]
        patch[:, head_h:torso_end, sel] = stripe[:, None, None]
    gap0 = int(round(0.42 * w)) + leg_shift
    gap1 = int(round(0.58 * w)) + leg_shift
    for x0, x1 in ((max(0, int(round(0.08 * w)) + leg_shift), gap0), (gap1, min(w, int(round(0.92 * w)) + leg_shift))):
        if x1 > x0:
            patch[:, torso_end:, x0:x1] = bottom[:, None, None]
            mask[torso_end:, x0:x1] = True
    return np.clip(patch * brightness, 0, 1) * mask


def _scene_rng(config: SynthConfig, scene_index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, 104729, scene_index])


def _textured_patch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c1, c2 = PALETTE[rng.choice(len(PALETTE), 2, replace=False)]
    patch = np.empty((3, h, w))
    patch[:] = c1[:, None, None]
    period = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        patch[:, ::period, :] = c2[:, None, None]
    else:
        patch[:, :, ::period] = c2[:, None, None]
    return patch


def render_scene(config: SynthConfig, scene_index: int) -> Scene:
    rng = _scene_rng(config, scene_index)
    hc, wc = config.canvas_h, config.canvas_w
    yy, xx = np.mgrid[0:hc, 0:wc] / max(hc, wc)
    tint = rng.uniform(0.25, 0.45, size=3)
    image = tint[:, None, None] + 0.1 * (yy + xx)[None] + rng.normal(0, 0.05, size=(3, hc, wc))

    for _ in range(config.distractor_count):
        dh, dw = (int(v) for v in rng.integers(6, 22, size=2))
        y0, x0 = int(rng.integers(0, hc - dh)), int(rng.integers(0, wc - dw))
        image[:, y0:y0 + dh, x0:x0 + dw] = _textured_patch(rng, dh, dw)

    count = int(rng.integers(config.persons_min, config.persons_max + 1))
    ids = rng.choice(config.num_identities, size=count, replace=False)
    jit = config.jitter_scale
    boxes, kept = [], []
    for identity in ids:
        u = rng.uniform(-1, 1, size=5)
        h = min(hc, max(8, int(round(BASE_HEIGHT * (1.0 + 1.5 * jit * u[0])))))
        w = max(4, int(round(h * ASPECT)))
        placed = None
        for _ in range(30):
            y0 = int(rng.integers(0, hc - h + 1))
            x0 = int(rng.integers(0, wc - w + 1))
            cand = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
            if not boxes or box_iou(cand[None], np.array(boxes)).max() < 0.15:
                placed = cand
                break
        if placed is None:
            continue
        sig = identity_signature(int(identity), config.seed)
        patch = render_person(sig, h, w, brightness=1.0 + jit * u[1],
                              split_shift=0.5 * jit * u[2], leg_shift=int(round(2 * jit * u[3] * w / 4)))
        x0, y0 = int(placed[0]), int(placed[1])
        region = image[:, y0:y0 + h, x0:x0 + w]
        visible = patch.any(axis=0)
        region[:, visible] = patch[:, visible]
        if rng.random() < config.occlusion_prob:
            frac = rng.uniform(0.2, 0.5)
            side = int(rng.integers(0, 4))
            if side in (0, 1):
                ow = max(1, int(round(frac * w)))
                xs = slice(0, ow) if side == 0 else slice(w - ow, w)
                region[:, :, xs] = _textured_patch(rng, h, ow)
            else:
                oh = max(1, int(round(frac * h)))
                ys = slice(0, oh) if side == 2 else slice(h - oh, h)
                region[:, ys, :] = _textured_patch(rng, oh, w)
        boxes.append(placed)
        kept.append(int(identity))
    return Scene(scene_index, np.clip(image, 0, 1).astype(np.float32),
                 np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(kept, dtype=np.int64))


def make_splits(config: SynthConfig) -> Splits:
    from .metrics import QueryCase

    train = [render_scene(config, i) for i in range(config.scenes_train)]
    test = [render_scene(config, config.scenes_train + i) for i in range(config.scenes_test)]
    appearances: dict[int, list[int]] = {}
    for scene in test:
        for identity in scene.identities:
            appearances.setdefault(int(identity), []).append(scene.scene_id)
    test_ids = [s.scene_id for s in test]
    cases, excluded = [], []
    for identity in sorted(appearances):
        if len(appearances[identity]) < 2:
            excluded.append(identity)
    for scene in test:
        for box, identity in zip(scene.boxes, scene.identities):
            if int(identity) in excluded:
                continue
            gallery = [sid for sid in test_ids if sid != scene.scene_id]
            cases.append(QueryCase(scene.scene_id, Box(*box), int(identity), gallery))
    return Splits(train, test, cases, excluded)


def person_patch_features(scene: Scene, grid: tuple[int, int] = (8, 4)) -> np.ndarray:
    """Block-averaged person patches, one row per annotation."""
    gh, gw = grid
    rows = []
    for x1, y1, x2, y2 in scene.boxes.astype(int):
        patch = scene.image[:, y1:y2, x1:x2]
        ys = np.linspace(0, patch.shape[1], gh + 1).astype(int)
        xs = np.linspace(0, patch.shape[2], gw + 1).astype(int)
        cells = [patch[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))
                 for i in range(gh) for j in range(gw)]
        rows.append(np.concatenate(cells))
    return np.array(rows).reshape(len(rows), -1)


# ---------------------------------------------------------------------------
# optional on-disk form
# ---------------------------------------------------------------------------
# annotations.txt: one header line "# canvas C H W", then one record per box
# with fixed-width fields
#   scene_id  (cols 1-8,  int)
#   identity  (cols 9-16, int)
#   x1 y1 x2 y2 (4 x 12 cols, %12.4f)
# scene_XXXXXX.bin holds C*H*W little-endian float32 values, row-major.

_ANN_FMT = "{:8d}{:8d}{:12.4f}{:12.4f}{:12.4f}{:12.4f}\n"


def dump_dataset(scenes: list[Scene], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not scenes:
        raise ValueError("nothing to dump")
    c, h, w = scenes[0].image.shape
    with open(directory / "annotations.txt", "w") as fh:
        fh.write(f"# canvas {c} {h} {w}\n")
        for scene in scenes:
            scene.image.astype("<f4").tofile(directory / f"scene_{scene.scene_id:06d}.bin")
            if len(scene.boxes) == 0:
                fh.write(_ANN_FMT.format(scene.scene_id, -2, 0, 0, 0, 0))
            for box, identity in zip(scene.boxes, scene.identities):
                fh.write(_ANN_FMT.format(scene.scene_id, int(identity), *box))


def load_dataset(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    lines = (directory / "annotations.txt").read_text().splitlines()
    c, h, w = (int(v) for v in lines[0].split()[2:5])
    records: dict[int, list] = {}
    for line in lines[1:]:
        sid, ident = int(line[0:8]), int(line[8:16])
        coords = [float(line[16 + 12 * i:28 + 12 * i]) for i in range(4)]
        records.setdefault(sid, [])
        if ident != -2:
            records[sid].append((coords, ident))
    scenes = []
    for sid in sorted(records):
        image = np.fromfile(directory / f"scene_{sid:06d}.bin", dtype="<f4").reshape(c, h, w)
        anns = records[sid]
        boxes = np.array([a[0] for a in anns], dtype=np.float64).reshape(-1, 4)
        scenes.append(Scene(sid, image.astype(np.float32), boxes, np.array([a[1] for a in anns], dtype=np.int64)))
    return scenes
