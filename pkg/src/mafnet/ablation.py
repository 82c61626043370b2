"""Module-removal and LANet-count sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .checkpoint import save_checkpoint
from .data import Sample
from .model import MafConfig, init_params
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

# Overrides applied to the base config; rows in the module-removal table.
VARIANTS: dict[str, dict] = {
    "backbone": {"use_mlfe": False, "use_llfe": False},
    "llfe": {"use_mlfe": False, "p_head": 0.0},
    "mlfe_drop": {"use_llfe": False},
    "no_drop": {"p_map": 0.0, "p_head": 0.0},
    "full": {},
}
LANET_VARIANT = "lanets"
LANET_COUNTS = (1, 2, 3, 4)
REPORT_HEADER = ("variant", "N", "seed", "acc", "f1")


@dataclass(frozen=True)
class Job:
    variant: str
    config: MafConfig
    seed: int

    @property
    def name(self) -> str:
        return f"{self.variant}-N{self.config.num_lanets}-s{self.seed}"


@dataclass(frozen=True)
class JobResult:
    job: Job
    # split name -> (acc, f1)
    scores: dict[str, tuple[float, float]]
    seconds: float = 0.0


def plan(base: MafConfig, seeds: Sequence[int]) -> list[Job]:
    """Variant jobs for every seed, then LANet-count jobs for every seed."""
    jobs = [Job(v, dataclasses.replace(base, **o).validate(), s) for v, o in VARIANTS.items() for s in seeds]
    jobs += [Job(LANET_VARIANT, dataclasses.replace(base, num_lanets=n).validate(), s)
             for n in LANET_COUNTS for s in seeds]
    return jobs


def run_job(job: Job, tc: TrainConfig, train_set: Sequence[Sample],
            test_sets: Mapping[str, Sequence[Sample]], out: str | os.PathLike | None = None) -> JobResult:
    """Train one job from scratch; ``job.seed`` drives init and batching.

    The first entry of ``test_sets`` is used for the per-epoch history.
    """
    start = time.perf_counter()
    first = next(iter(test_sets.values()))
    params = init_params(job.config, job.seed)
    params, history = train(job.config, params, train_set, first, dataclasses.replace(tc, seed=job.seed))
    scores = {name: evaluate(params, samples, job.config)[:2] for name, samples in test_sets.items()}
    if out is not None:
        job_dir = Path(out) / job.name
        save_checkpoint(job_dir / "checkpoint", job.config, params)
        (job_dir / "history.csv").write_text(history.to_csv())
    log.info("%s %s", job.name, " ".join(f"{k}_acc={a:.4f}" for k, (a, _) in scores.items()))
    return JobResult(job, scores, time.perf_counter() - start)


def run_sweep(jobs: Sequence[Job], tc: TrainConfig, train_set: Sequence[Sample],
              test_sets: Mapping[str, Sequence[Sample]], out: str | os.PathLike | None = None,
              max_jobs: int = 1) -> list[JobResult]:
    """Run ``jobs`` in order, at most ``max_jobs`` at a time.

    Jobs with an identical (config, seed) pair train once; the result is shared.
    """
    unique: dict[tuple, Job] = {}
    for job in jobs:
        unique.setdefault((job.config, job.seed), job)
    work = list(unique.values())
    if max_jobs > 1:
        with ProcessPoolExecutor(max_workers=max_jobs) as pool:
            futures = [pool.submit(run_job, j, tc, train_set, test_sets, out) for j in work]
            done = [f.result() for f in futures]
    else:
        done = [run_job(j, tc, train_set, test_sets, out) for j in work]
    by_key = {(r.job.config, r.job.seed): r for r in done}
    return [dataclasses.replace(by_key[(j.config, j.seed)], job=j) for j in jobs]


def report_csv(results: Sequence[JobResult], split: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in results:
        acc, f1 = r.scores[split]
        writer.writerow([r.job.variant, r.job.config.num_lanets, r.job.seed, f"{acc:.4f}", f"{f1:.4f}"])
    return buf.getvalue()


def mean_acc(results: Sequence[JobResult], split: str, variant: str, n: int | None = None) -> float:
    accs = [r.scores[split][0] for r in results
            if r.job.variant == variant and (n is None or r.job.config.num_lanets == n)]
    if not accs:
        raise KeyError(f"no results for variant {variant!r} N={n}")
    return sum(accs) / len(accs)
