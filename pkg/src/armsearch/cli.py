"""``arm-search`` command-line workbench.

    arm-search <train|eval|ablate|gradcheck|bench> [--config FILE]
               [--set key=value]... [--seed N] [--out DIR]

Every command prints JSON lines on stdout (also appended to
``OUT/<command>.jsonl``); each line carries ``command``, ``seed``,
``config_hash`` and ``version``. Human-readable summaries go to stderr.

Exit codes: 0 success, 1 usage or contract error, 2 numeric failure
(non-finite loss, checkpoint checksum, failed gradient check).

Detection dump (``OUT/detections.txt``, written by ``eval``): one line per
detection, space separated::

    scene_id x1 y1 x2 y2 det_score e_0,e_1,...,e_{D-1}

with box corners in pixels (``%.4f``), the score as ``%.6f`` and the
embedding as comma-joined ``%.6f`` values.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import gradsuite, plotting
from .ablation import ablation_seeds, format_table, run_ablation, summarize
from .arm import UsageError, arm_forward
from .config import RunConfig, load_config
from .gradcheck import GradCheckReport
from .metrics import MetricsReport
from .model import NonFiniteLoss, jittered_proposals
from .synth import make_splits, render_scene
from .tensor import ContractError, Tensor, no_grad
from .train import EpochLog, build_model, evaluate_model, train_model

COMMANDS = ("train", "eval", "ablate", "gradcheck", "bench")
THREADS_ENV = "ARM_SEARCH_THREADS"
CHECKPOINT_NAME = "model.ckpt"
BENCH_WARMUP = 5
BENCH_REPEATS = 25
BENCH_ROIS = 16


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arm-search", description="Person-search workbench with ARM ablations.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for data, weights and training order")
    p.add_argument("--out", help="output directory (default: the config's out key)")
    p.add_argument("--checkpoint", help="eval/bench: checkpoint to load (default OUT/model.ckpt)")
    p.add_argument("--scope", default="all", choices=("all",) + gradsuite.SCOPES,
                   help="gradcheck: which suite to run")
    p.add_argument("--seeds", type=int, default=gradsuite.DEFAULT_SEEDS,
                   help="gradcheck: random instances per case")
    return p


def version_string() -> str:
    """``git describe``-style ``v<version>-<commits>-g<hash>``."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    here = Path(__file__).resolve().parent
    try:
        def git(*args):
            return subprocess.run(["git", *args], cwd=here, capture_output=True, text=True,
                                  check=True, timeout=5).stdout.strip()
        return git("describe", "--tags", "--long", "--always") if git("tag") else \
            f"v{base}-{git('rev-list', '--count', 'HEAD')}-g{git('rev-parse', '--short', 'HEAD')}"
    except (OSError, subprocess.SubprocessError):
        return f"v{base}-0-gunknown"


class Emitter:
    def __init__(self, command: str, config: RunConfig, out: Path, stream=None):
        self.base = {"command": command, "seed": config.seed, "config_hash": config.hash(),
                     "version": version_string()}
        self.stream = stream or sys.stdout
        self.path = out / f"{command}.jsonl"
        out.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, **fields) -> dict:
        record = {**self.base, **fields}
        line = json.dumps(record)
        print(line, file=self.stream, flush=True)
        with self.path.open("a") as fh:
            fh.write(line + "\n")
        return record


def _report_fields(report: MetricsReport) -> dict:
    return {"map": report.map, "top1": report.top1, "det_recall": report.det_recall,
            "det_ap": report.det_ap, "gallery_size": report.gallery_size,
            "queries": len(report.per_query_ap), "excluded_queries": report.excluded_queries}


def sweep_sizes(cases) -> list[int]:
    available = max((len(c.gallery) for c in cases), default=0)
    return [s for s in (5, 10, 20, 50, 100) if s < available] + ([available] if available else [])


def write_detections(path: Path, gallery: dict) -> None:
    with path.open("w") as fh:
        for sid in sorted(gallery):
            for d in gallery[sid]:
                emb = ",".join(f"{v:.6f}" for v in d.embedding)
                fh.write(f"{sid} {d.box.x1:.4f} {d.box.y1:.4f} {d.box.x2:.4f} {d.box.y2:.4f} "
                         f"{d.det_score:.6f} {emb}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path, emit: Emitter) -> int:
    splits = make_splits(cfg.synth)
    model = build_model(cfg.model_config(), cfg.synth.num_identities, cfg.seed)
    config_text = cfg.to_text()
    (out / "config.txt").write_text(config_text)
    final = out / CHECKPOINT_NAME
    if cfg.epochs == 0:
        checksum = ckpt_io.save(final, model, config_text)
        emit(event="checkpoint", epoch=0, path=str(final), checksum=checksum)
        return 0

    def on_epoch(entry: EpochLog):
        path = out / f"epoch_{entry.epoch + 1:02d}.ckpt"
        checksum = ckpt_io.save(path, model, config_text)
        ckpt_io.save(final, model, config_text)
        art, _ = evaluate_model(model, splits, cfg.seed)
        model.train()
        emit(event="epoch", epoch=entry.epoch + 1, lr=entry.lr, loss=entry.total, losses=entry.losses,
             checkpoint=str(path), checksum=checksum, **_report_fields(art.report),
             seconds=round(entry.seconds, 3))

    history = train_model(model, splits.train, cfg.sgd, cfg.epochs, cfg.batch_size, cfg.seed, on_epoch)
    plotting.loss_curve([h.epoch + 1 for h in history], [h.total for h in history], out / "train_loss.png",
                        {k: [h.losses[k] for h in history] for k in history[0].losses})
    emit(event="done", path=str(final), checksum=ckpt_io.load(final).checksum)
    print(f"trained {cfg.epochs} epochs; final loss {history[-1].total:.4f}; checkpoint {final}", file=sys.stderr)
    return 0


def _load_model(cfg: RunConfig, path: Path):
    model = build_model(cfg.model_config(), cfg.synth.num_identities, cfg.seed)
    ckpt_io.restore(model, ckpt_io.load(path))
    model.eval()
    return model


def cmd_eval(cfg: RunConfig, out: Path, emit: Emitter, checkpoint: Path) -> int:
    model = _load_model(cfg, checkpoint)
    splits = make_splits(cfg.synth)
    sizes = sweep_sizes(splits.query_cases)
    art, sweep = evaluate_model(model, splits, cfg.seed, sizes)
    write_detections(out / "detections.txt", art.gallery_dets)
    emit(event="report", checkpoint=str(checkpoint), **_report_fields(art.report))
    for point in sweep:
        emit(event="sweep", **_report_fields(point))
    if sweep:
        plotting.sweep_curve([p.gallery_size for p in sweep], [p.map for p in sweep], out / "gallery_sweep.png",
                             [p.top1 for p in sweep])
    r = art.report
    print(f"mAP {r.map:.4f}  top-1 {r.top1:.4f}  det recall {r.det_recall:.4f}  det AP {r.det_ap:.4f}",
          file=sys.stderr)
    return 0


def cmd_ablate(cfg: RunConfig, out: Path, emit: Emitter) -> int:
    checksums = {}
    seeds = ablation_seeds(cfg)

    def on_data(seed, checksum):
        checksums[seed] = checksum
        emit(event="provenance", data_seed=seed, data_checksum=checksum, variants=list(cfg.variants))

    def on_row(row):
        emit(event="row", variant=row.variant, data_seed=row.seed, data_checksum=checksums[row.seed],
             final_loss=row.final_loss, **_report_fields(row.report), seconds=round(row.seconds, 3))

    rows = run_ablation(cfg, seeds, on_row, on_data)
    summaries = summarize(rows, cfg.variants)
    for s in summaries:
        emit(event="summary", variant=s.variant, runs=s.runs, map=s.mean_map, map_std=s.std_map,
             top1=s.mean_top1, det_ap=s.mean_det_ap)
    with (out / "ablation.tsv").open("w") as fh:
        fh.write("variant\tseed\tmap\ttop1\tdet_recall\tdet_ap\tgallery_size\tfinal_loss\n")
        for r in rows:
            m = r.report
            fh.write(f"{r.variant}\t{r.seed}\t{m.map:.6f}\t{m.top1:.6f}\t{m.det_recall:.6f}\t{m.det_ap:.6f}"
                     f"\t{m.gallery_size}\t{r.final_loss:.6f}\n")
    plotting.ablation_bars({s.variant: s.mean_map for s in summaries}, out / "ablation.png",
                           {s.variant: s.std_map for s in summaries})
    print(format_table(summaries), file=sys.stderr)
    return 0


def _gradcheck_fields(report: GradCheckReport) -> dict:
    return {"max_relative_error": report.max_relative_error, "tolerance": report.tolerance,
            "passed": report.passed, "location": report.location}


def cmd_gradcheck(cfg: RunConfig, out: Path, emit: Emitter, scope: str, seeds: int) -> int:
    if seeds < 1:
        raise UsageError("--seeds must be at least 1")
    results = gradsuite.run_suite(scope, seeds)
    failed = []
    by_case: dict[str, list] = {}
    for r in results:
        by_case.setdefault(r.name, []).append(r)
    for name, runs in by_case.items():
        worst = max(runs, key=lambda r: r.report.max_relative_error)
        ok = all(r.passed for r in runs)
        if not ok:
            failed.append(worst)
        emit(event="case", op=name, scope=worst.scope, seeds=len(runs), worst_seed=worst.seed,
             **{**_gradcheck_fields(worst.report), "passed": ok})
    control = gradsuite.negative_control(cfg.seed)
    detected = not control.passed
    emit(event="negative_control", op=control.name, detected=detected, **_gradcheck_fields(control.report))
    for r in failed:
        print(f"FAIL {r.name} (seed {r.seed}): max error {r.report.max_relative_error:.3e} "
              f"> tolerance {r.report.tolerance:.0e} at {r.report.location}", file=sys.stderr)
    if not detected:
        print("FAIL negative control: injected sign error went unnoticed", file=sys.stderr)
    ok = not failed and detected
    emit(event="done", passed=ok, cases=len(by_case), failures=[r.name for r in failed])
    print(f"gradcheck {scope}: {len(by_case) - len(failed)}/{len(by_case)} cases pass", file=sys.stderr)
    return 0 if ok else 2


def _median_ms(fn, warmup: int = BENCH_WARMUP, repeats: int = BENCH_REPEATS) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1000.0)


def cmd_bench(cfg: RunConfig, out: Path, emit: Emitter, checkpoint: Path | None) -> int:
    model = _load_model(cfg, checkpoint) if checkpoint else \
        build_model(cfg.model_config(), cfg.synth.num_identities, cfg.seed)
    model.eval()
    scenes = [render_scene(cfg.synth, i) for i in range(cfg.batch_size)]
    images = np.stack([s.image for s in scenes])
    props = [jittered_proposals(s.boxes, np.random.default_rng([cfg.seed, 5, i]), s.image.shape[2],
                                s.image.shape[1], cfg.model.proposals_per_gt, cfg.model.background_proposals,
                                cfg.model.proposal_jitter) for i, s in enumerate(scenes)]
    arm = model.det.arm
    rois = Tensor(np.random.default_rng([cfg.seed, 6]).normal(
        size=(BENCH_ROIS, cfg.arm.channels_in, cfg.arm.roi_size, cfg.arm.roi_size)))
    with no_grad():
        arm_ms = _median_ms(lambda: arm_forward(rois, arm.params, arm.config, False, arm.layout))
        search_ms = _median_ms(lambda: model.search_forward(images, props))
    emit(event="bench", variant=cfg.variant, warmup=BENCH_WARMUP, repeats=BENCH_REPEATS,
         rois_per_arm_forward=BENCH_ROIS, ms_per_arm_forward=arm_ms,
         scenes_per_second=len(scenes) / (search_ms / 1000.0), ms_per_search_batch=search_ms,
         scenes_per_batch=len(scenes))
    print(f"{cfg.variant}: arm_forward {arm_ms:.2f} ms / {BENCH_ROIS} RoIs, "
          f"{len(scenes) / (search_ms / 1000.0):.1f} scenes/s", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.out)
    emit = Emitter(args.command, cfg, out)
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    with threadpool_limits(limits=_threads()):
        if args.command == "train":
            return cmd_train(cfg, out, emit)
        if args.command == "eval":
            return cmd_eval(cfg, out, emit, checkpoint or out / CHECKPOINT_NAME)
        if args.command == "ablate":
            return cmd_ablate(cfg, out, emit)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out, emit, args.scope, args.seeds)
        return cmd_bench(cfg, out, emit, checkpoint)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except ckpt_io.ChecksumError as exc:
        print(f"arm-search: corrupt checkpoint: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"arm-search: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ContractError, ValueError) as exc:
        print(f"arm-search: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"arm-search: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
