"""Pareto machinery for bi-objective minimization: sorting, crowding, selection,
hypervolume, convergence and Latin hypercube sampling."""

from __future__ import annotations

import csv
import os
from typing import Sequence

import numpy as np
from scipy.stats import qmc

TINY = 1e-300


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return bool(np.all(a <= b) and np.any(a < b))


def dominance_matrix(points) -> np.ndarray:
    """``D[i, j]`` is True when point ``i`` dominates point ``j``."""
    P = np.asarray(points, dtype=float)
    le = np.all(P[:, None, :] <= P[None, :, :], axis=2)
    lt = np.any(P[:, None, :] < P[None, :, :], axis=2)
    return le & lt


def non_dominated_sort(points) -> list[np.ndarray]:
    """Partition point indices into fronts, best first (fast NSGA-II sort).

    Indices inside each front are returned in ascending order.
    """
    P = np.asarray(points, dtype=float)
    n = P.shape[0]
    if n == 0:
        return []
    D = dominance_matrix(P)
    count = D.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    while current.size:
        fronts.append(current)
        count = count - D[current].sum(axis=0)
        count[np.concatenate(fronts)] = -1
        current = np.flatnonzero(count == 0)
    return fronts


def ranks_from_fronts(fronts: Sequence[np.ndarray], n: int) -> np.ndarray:
    rank = np.zeros(n, dtype=int)
    for k, f in enumerate(fronts, start=1):
        rank[f] = k
    return rank


def crowding_distance(front_points, ids=None) -> np.ndarray:
    """NSGA-II crowding distance of each point within one front.

    Per objective the points are ordered by value, ties broken by ``ids``
    (default: position). Extremes get ``inf``; interior points accumulate the
    neighbour gap divided by the front's range for that objective.
    """
    F = np.asarray(front_points, dtype=float)
    n, m = F.shape
    ids = np.arange(n) if ids is None else np.asarray(ids)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.lexsort((ids, F[:, k]))
        vals = F[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span > 0:
            dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def select(points, target_size: int, min_offspring: int, ids=None) -> np.ndarray:
    """Elitist NSGA-II survivor selection; returns selected indices, sorted.

    The whole first front is kept whenever it exceeds ``min_offspring`` or
    already fills ``target_size``. Otherwise fronts are admitted in rank order
    and the last partial front is cut by descending crowding distance.
    """
    P = np.asarray(points, dtype=float)
    n = P.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if n <= target_size:
        return np.arange(n)
    fronts = non_dominated_sort(P)
    if fronts[0].size > min_offspring or fronts[0].size >= target_size:
        return np.sort(fronts[0])
    chosen: list[int] = []
    for front in fronts:
        if len(chosen) + front.size <= target_size:
            chosen.extend(front.tolist())
            if len(chosen) == target_size:
                break
            continue
        cd = crowding_distance(P[front], ids[front])
        order = np.lexsort((ids[front], -cd))
        chosen.extend(front[order[: target_size - len(chosen)]].tolist())
        break
    return np.sort(np.array(chosen, dtype=int))


def hypervolume_2d(points, ref) -> float:
    """Area dominated by ``points`` and bounded by the reference point ``ref``.

    Points that do not strictly dominate ``ref`` contribute nothing.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    r = np.asarray(ref, dtype=float)
    P = P[np.all(P < r, axis=1)]
    if P.size == 0:
        return 0.0
    P = P[np.lexsort((P[:, 1], P[:, 0]))]
    return _staircase_area(P, r)


def _staircase_area(P: np.ndarray, r: np.ndarray) -> float:
    # P sorted by J1 ascending (ties by J2); each strict improvement in J2 adds a slab
    area = 0.0
    prev_y = r[1]
    for x, y in P:
        if y < prev_y:
            area += (r[0] - x) * (prev_y - y)
            prev_y = y
    return float(area)


def relative_changes(hv_history) -> np.ndarray:
    hv = np.asarray(hv_history, dtype=float)
    if hv.size < 2:
        return np.zeros(0)
    return np.abs(np.diff(hv)) / np.maximum(hv[1:], TINY)


def converged(hv_history, eps_hv: float, window: int = 5) -> bool:
    """True when each of the last ``window`` relative HV changes is below ``eps_hv``."""
    hv = np.asarray(hv_history, dtype=float)
    if hv.size < window + 1:
        return False
    return bool(np.max(relative_changes(hv[-(window + 1):])) < eps_hv)


def latin_hypercube(n: int, ranges, seed) -> np.ndarray:
    """``n`` stratified samples, one per stratum in each dimension, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("need at least one sample")
    R = np.asarray(ranges, dtype=float).reshape(-1, 2)
    if np.any(R[:, 1] < R[:, 0]):
        raise ValueError("ranges must be ordered (low, high)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    unit = qmc.LatinHypercube(d=R.shape[0], seed=rng).random(n)
    return R[:, 0] + unit * (R[:, 1] - R[:, 0])


def write_hv_history(path: str | os.PathLike, hv_history) -> None:
    hv = np.asarray(hv_history, dtype=float)
    rel = np.concatenate([[np.nan], relative_changes(hv)]) if hv.size else hv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "HV", "relative_change"])
        for i, (v, c) in enumerate(zip(hv, rel)):
            w.writerow([i, repr(float(v)), repr(float(c))])


def write_fronts(path: str | os.PathLike, ids, ranks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "rank"])
        for i, r in zip(ids, ranks):
            w.writerow([int(i), int(r)])
