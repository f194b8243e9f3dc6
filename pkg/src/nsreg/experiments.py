"""Multi-seed, multi-rotation train/evaluate loops shared by the CLI and scripts."""
from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor

from .evaluation import EvalReport, SplitConfig, evaluate, make_rotations
from .graph import AttributedGraph
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# named compositions used throughout the benchmark
VARIANTS = {
    "nsreg": {"head": "bce", "nsr_enabled": True},
    "bce": {"head": "bce", "nsr_enabled": False},
    "deviation": {"head": "deviation", "nsr_enabled": False},
    "deviation+nsr": {"head": "deviation", "nsr_enabled": True},
    "nsreg-no-unconnected": {"head": "bce", "nsr_enabled": True, "use_unconnected_normal": False},
    "hypersphere": {"head": "hypersphere", "nsr_enabled": False},
}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NSREG_THREADS", "1")))
    except ValueError:
        return 1


def _one_run(args):
    g, cfg, split = args
    state, _ = train(g, split, cfg)
    return evaluate(state.detector, g, split)


def run_open_set(g: AttributedGraph, cfg: TrainConfig, seeds, workers: int | None = None, **extra) -> EvalReport:
    """Train and evaluate ``cfg`` for every seed and every rotation.

    Seeds drive both the split sampling and the model initialisation.
    """
    jobs = []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=int(seed))
        split_cfg = SplitConfig(cfg.n_labelled_anomalies, cfg.labelled_normal_fraction, int(seed))
        for split in make_rotations(g, split_cfg):
            jobs.append((g, run_cfg, split))
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_one_run, jobs))
    else:
        rows = [_one_run(j) for j in jobs]
    report = EvalReport()
    for row in rows:
        report.add(row, **extra)
    return report


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    return dataclasses.replace(base, **VARIANTS[name])
