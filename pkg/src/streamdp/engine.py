"""Asynchronous streaming engine: workers snapshot, fit a minibatch, and merge.

Each worker repeatedly claims the next minibatch from a shared cursor over a
seeded shuffle of the training set, takes a snapshot of the central
posterior, runs minibatch VI with that snapshot as its prior, and merges the
result. Only the merge is serialized; minibatch VI runs without any lock.

With the ``process`` backend the VI step of each worker is executed in a
process pool (the worker thread blocks on the future), which gives real
parallelism for the CPU-bound part while the central store stays in-process.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import threading
import time
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .central import CentralPosterior, Snapshot
from .expfam import ConventionalNiw, log_predictive_many, stack, to_natural
from .minibatch_vi import MinibatchPosterior, run_minibatch_vi

log = logging.getLogger(__name__)

TIMING_FIELDS = ("wall_time", "vi_seconds", "lap_seconds", "lock_seconds")


@dataclass
class RunConfig:
    prior: ConventionalNiw
    n_workers: int = 1
    minibatch_size: int = 50
    alpha: float = 5.0
    k_max: int = 50
    tol: float = 1e-6
    max_iters: int = 500
    seed: int = 0
    component_id_enabled: bool = True
    eval_every: int = 0
    backend: str = "auto"  # "thread", "process" or "auto"
    log_responsibilities: bool = False

    def validate(self) -> None:
        for name in ("n_workers", "minibatch_size", "k_max", "max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be nonnegative")
        if self.backend not in ("thread", "process", "auto"):
            raise ValueError(f"unknown backend {self.backend!r}")
        self.prior.validate()

    def resolved_backend(self) -> str:
        if self.backend != "auto":
            return self.backend
        cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
        return "process" if self.n_workers > 1 and cpus > 1 else "thread"


@dataclass
class MergeRecord:
    version: int
    worker: int
    minibatch: int
    wall_time: float
    k_o: int
    k_before: int
    k_after: int
    k_m: int
    n_new: int
    sigma: list
    lap_solved: bool
    lap_seconds: float
    lock_seconds: float
    vi_seconds: float
    vi_iterations: int
    held_out_ll: Optional[float] = None
    # test-mode replay data, kept in memory only
    indices: Optional[np.ndarray] = field(default=None, repr=False)
    resp: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("indices", "resp")}
        return doc


@dataclass
class RunTrace:
    records: list
    total_seconds: float = 0.0
    final_k: int = 0
    final_held_out_ll: Optional[float] = None
    n_workers: int = 1
    backend: str = "thread"

    @property
    def n_merges(self) -> int:
        return len(self.records)

    @property
    def matchings_solved(self) -> int:
        return sum(r.lap_solved for r in self.records)

    def summary(self) -> dict:
        return {"n_workers": self.n_workers, "backend": self.backend, "merges": self.n_merges,
                "total_seconds": self.total_seconds, "final_k": self.final_k,
                "matchings_solved": self.matchings_solved, "final_held_out_ll": self.final_held_out_ll}

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    def write_summary_csv(self, path) -> None:
        summary = self.summary()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary))
            writer.writeheader()
            writer.writerow(summary)


# ---------------------------------------------------------------------------
# evaluation

def held_out_ll(posterior, test) -> float:
    """Mean log predictive density of ``test`` under the CRP-weighted mixture.

    ``posterior`` may be a :class:`CentralPosterior` or a :class:`Snapshot`
    (the latter needs ``base_prior`` and ``alpha`` attributes, so pass a
    tuple ``(snapshot, base_prior, alpha)`` instead).
    """
    if isinstance(posterior, CentralPosterior):
        snap, base, alpha = posterior.snapshot(), posterior.base_prior, posterior.alpha
    else:
        snap, base, alpha = posterior
    x = np.asarray(test, dtype=float)
    if x.size == 0:
        raise ValueError("test set is empty")
    x = x.reshape(-1, base.dim)
    etas = list(snap.etas) + [base]
    weights = np.append(np.asarray(snap.t_stats, dtype=float), alpha)
    logw = np.log(weights / weights.sum())
    with np.errstate(divide="ignore"):
        lp = log_predictive_many(*stack(etas), x) + logw[None, :]
    return float(logsumexp(lp, axis=1).mean())


# ---------------------------------------------------------------------------
# orchestration

def _minibatch_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(1)[0])


def partition(n: int, minibatch_size: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into consecutive minibatches."""
    order = np.random.default_rng(seed).permutation(n)
    return [order[i:i + minibatch_size] for i in range(0, n, minibatch_size)]


def _fit(x, snap: Snapshot, base, cfg: RunConfig, seed: int) -> MinibatchPosterior:
    return run_minibatch_vi(x, snap.etas, snap.prior_stats, base, cfg.alpha, k_max=cfg.k_max,
                            tol=cfg.tol, max_iters=cfg.max_iters, seed=seed)


def run(config: RunConfig, train, test):
    """Stream ``train`` through ``config.n_workers`` asynchronous workers.

    Returns the final :class:`CentralPosterior` and the :class:`RunTrace`.
    """
    config.validate()
    train = np.asarray(train, dtype=float)
    test = np.asarray(test, dtype=float)
    d = config.prior.dim
    if train.ndim != 2 or train.shape[0] == 0 or train.shape[1] != d:
        raise ValueError(f"training data must be a nonempty N x {d} array")
    if test.ndim != 2 or test.shape[0] == 0 or test.shape[1] != d:
        raise ValueError(f"test data must be a nonempty N x {d} array")
    if not (np.all(np.isfinite(train)) and np.all(np.isfinite(test))):
        raise ValueError("datasets contain non-finite values")

    base = to_natural(config.prior)
    central = CentralPosterior(base, config.alpha)
    batches = partition(len(train), config.minibatch_size, config.seed)
    backend = config.resolved_backend()
    executor: Optional[Executor] = ProcessPoolExecutor(config.n_workers) if backend == "process" else None

    cursor_lock = threading.Lock()
    cursor = iter(range(len(batches)))
    records: list[MergeRecord] = []
    records_lock = threading.Lock()
    errors: list[BaseException] = []
    start = time.perf_counter()

    def next_batch():
        with cursor_lock:
            return next(cursor, None)

    def worker(wid: int):
        try:
            while not errors:
                idx = next_batch()
                if idx is None:
                    return
                rows = batches[idx]
                x = train[rows]
                snap = central.snapshot()
                t0 = time.perf_counter()
                seed = _minibatch_seed(config.seed, idx)
                if executor is not None:
                    mb = executor.submit(_fit, x, snap, base, config, seed).result()
                else:
                    mb = _fit(x, snap, base, config, seed)
                vi_seconds = time.perf_counter() - t0
                report = central.merge(snap, mb, component_id=config.component_id_enabled)
                rec = MergeRecord(
                    version=report.version, worker=wid, minibatch=idx,
                    wall_time=time.perf_counter() - start, k_o=report.k_o, k_before=report.k_before,
                    k_after=report.k_after, k_m=report.k_m, n_new=report.n_new,
                    sigma=list(report.matching.sigma), lap_solved=report.matching.lap_solved,
                    lap_seconds=report.matching.lap_seconds, lock_seconds=report.lock_seconds,
                    vi_seconds=vi_seconds, vi_iterations=len(mb.elbo_trace),
                    indices=rows if config.log_responsibilities else None,
                    resp=mb.resp if config.log_responsibilities else None)
                if config.eval_every and report.version % config.eval_every == 0:
                    rec.held_out_ll = held_out_ll((report.snapshot, base, config.alpha), test)
                with records_lock:
                    records.append(rec)
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)

    try:
        if config.n_workers == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(w,), name=f"streamdp-worker-{w}")
                       for w in range(config.n_workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
    finally:
        if executor is not None:
            executor.shutdown()
    if errors:
        raise errors[0]

    total = time.perf_counter() - start
    records.sort(key=lambda r: r.version)
    final_ll = held_out_ll(central, test)
    if records and records[-1].held_out_ll is None:
        records[-1].held_out_ll = final_ll
    trace = RunTrace(records=records, total_seconds=total, final_k=central.k, final_held_out_ll=final_ll,
                     n_workers=config.n_workers, backend=backend)
    log.info("run finished: %d merges, K=%d, %d matchings, held-out LL %.4f, %.2fs",
             trace.n_merges, trace.final_k, trace.matchings_solved, final_ll, total)
    return central, trace


def batch_vi(data, prior: ConventionalNiw, alpha: float, truncation: int = 200, tol: float = 1e-6,
             max_iters: int = 500, seed: int = 0):
    """Baseline: truncated DP mean-field VI over the whole dataset at once.

    Returns ``(posterior, minibatch_result)`` where ``posterior`` is a
    :class:`CentralPosterior` holding the fitted components.
    """
    base = to_natural(prior)
    mb = run_minibatch_vi(data, [], [], base, alpha, k_max=truncation, tol=tol, max_iters=max_iters, seed=seed)
    central = CentralPosterior(base, alpha)
    central.merge(central.snapshot(), mb)
    return central, mb
