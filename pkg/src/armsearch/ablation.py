"""Variant-by-seed ablation runs on identical synthetic data."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .metrics import MetricsReport
from .synth import dataset_checksum, make_splits
from .train import train_and_evaluate


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricsReport
    final_loss: float
    seconds: float


@dataclass
class VariantSummary:
    variant: str
    runs: int
    mean_map: float
    std_map: float
    mean_top1: float
    mean_det_ap: float


def ablation_seeds(config: RunConfig) -> list[int]:
    return [config.seed + i for i in range(config.repeats)]


def run_ablation(config: RunConfig, seeds: Sequence[int] | None = None,
                 on_row: Callable[[AblationRow], None] | None = None,
                 on_data: Callable[[int, str], None] | None = None) -> list[AblationRow]:
    """Train and evaluate every configured variant on each seed's data.

    All variants of one seed see the same scenes, queries, proposal draws and
    batch order; only the ARM layout differs.
    """
    rows = []
    for seed in seeds if seeds is not None else ablation_seeds(config):
        run = config.with_seed(seed)
        splits = make_splits(run.synth)
        if on_data is not None:
            on_data(seed, dataset_checksum(splits))
        for variant in run.variants:
            t0 = time.perf_counter()
            _, history, art = train_and_evaluate(run.model_config(variant), splits, run.sgd, run.epochs,
                                                 run.batch_size, seed, run.synth.num_identities)
            final = history[-1].total if history else float("nan")
            row = AblationRow(variant, seed, art.report, final, time.perf_counter() - t0)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def summarize(rows: Sequence[AblationRow], order: Sequence[str]) -> list[VariantSummary]:
    out = []
    for variant in order:
        mine = [r for r in rows if r.variant == variant]
        if not mine:
            continue
        maps = np.array([r.report.map for r in mine])
        out.append(VariantSummary(variant, len(mine), float(maps.mean()), float(maps.std()),
                                  float(np.mean([r.report.top1 for r in mine])),
                                  float(np.mean([r.report.det_ap for r in mine]))))
    return out


def format_table(summaries: Sequence[VariantSummary]) -> str:
    lines = [f"{'variant':<16}{'runs':>5}{'mAP':>9}{'+/-':>8}{'top-1':>9}{'det AP':>9}"]
    for s in summaries:
        lines.append(f"{s.variant:<16}{s.runs:>5}{s.mean_map:>9.4f}{s.std_map:>8.4f}"
                     f"{s.mean_top1:>9.4f}{s.mean_det_ap:>9.4f}")
    return "\n".join(lines)
