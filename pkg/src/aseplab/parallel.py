"""Deterministic replica fan-out over a worker pool.

Replicas are partitioned into fixed chunks independent of the worker
count; each replica seeds its own stream from (master_seed, task tag,
replica index), and chunk results merge in chunk order with commutative
sums (exact integers, fixed-order float addition).  Output is therefore
byte-identical for any number of workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Mapping

import numpy as np

CHUNK_SIZE = 4096

ChunkFn = Callable[[dict, int, int, int], dict]


def _merge_into(total: dict, part: Mapping) -> dict:
    for key, val in part.items():
        if key.endswith("_concat"):
            total.setdefault(key, []).append(val)
        elif key in total:
            total[key] = total[key] + val
        else:
            total[key] = val
    return total


def _finalize(total: dict) -> dict:
    for key, val in list(total.items()):
        if key.endswith("_concat"):
            total[key] = np.concatenate(val)
    return total


def run_replicas(
    task: ChunkFn,
    params: dict,
    replicas: int,
    master_seed: int,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> dict:
    """Run ``task(params, master_seed, lo, hi)`` over [0, replicas) and merge.

    The task must derive all randomness for replica r from
    ``RngStream(master_seed, (tag, r))`` so that results do not depend on
    chunking or scheduling.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    bounds = [(lo, min(lo + chunk_size, replicas)) for lo in range(0, replicas, chunk_size)]
    total: dict = {}
    if workers <= 1 or len(bounds) == 1:
        for lo, hi in bounds:
            _merge_into(total, task(params, master_seed, lo, hi))
        return _finalize(total)

    from ._kernels import warm_up

    warm_up()  # compile before forking so children inherit the machine code
    max_workers = min(workers, os.cpu_count() or 1, len(bounds))
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(task, params, master_seed, lo, hi) for lo, hi in bounds]
        for fut in futures:  # submission order == chunk order: deterministic merge
            _merge_into(total, fut.result())
    return _finalize(total)
