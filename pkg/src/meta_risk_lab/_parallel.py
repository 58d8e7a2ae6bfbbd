"""Deterministic work-sharing: results ordered by work item, never by completion."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

__all__ = ["resolve_jobs", "parallel_map"]

JOBS_ENV_VAR = "META_RISK_LAB_JOBS"


def resolve_jobs(jobs=None) -> int:
    """Explicit value, else the META_RISK_LAB_JOBS env var, else 1."""
    if jobs is not None:
        return max(1, int(jobs))
    env = os.environ.get(JOBS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def parallel_map(fn, items, jobs=None):
    """map(fn, items) with an optional process pool; output order is item order."""
    items = list(items)
    jobs = resolve_jobs(jobs)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
