"""Straightness, exact W2, transport cost and cross-model coupling similarity."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .odesolve import Trajectory

W2_MAX_POINTS = 512
STRAIGHTNESS_GRID = 64


def resample(traj: Trajectory, m: int = STRAIGHTNESS_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate recorded states onto m+1 uniform times over the span."""
    times, states = traj.times, traj.states
    if len(times) < 2:
        raise ValueError("trajectory needs at least two states")
    ta, tb = float(times[0]), float(times[-1])
    if ta == tb:
        raise ValueError("degenerate trajectory span")
    grid = ta + (tb - ta) * np.arange(m + 1) / m
    if tb < ta:  # integrate backwards in time: search on the reversed axis
        times, states, grid_s = times[::-1], states[::-1], grid[::-1]
    else:
        grid_s = grid
    idx = np.clip(np.searchsorted(times, grid_s, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[idx], times[idx + 1]
    w = ((grid_s - t0) / (t1 - t0))[:, None, None]
    out = (1.0 - w) * states[idx] + w * states[idx + 1]
    if tb < ta:
        out = out[::-1]
    return grid, out


def straightness(traj: Trajectory, m: int = STRAIGHTNESS_GRID) -> float:
    """Mean squared deviation of segment velocities from the end-to-end velocity.

    Zero exactly when the resampled path is a straight line traversed at
    constant speed.
    """
    grid, pts = resample(traj, m)
    dt = np.diff(grid)[:, None, None]
    seg_vel = np.diff(pts, axis=0) / dt
    ref = (pts[-1] - pts[0]) / (grid[-1] - grid[0])
    dev = np.sum((seg_vel - ref[None]) ** 2, axis=2)  # (m, n)
    return float(dev.mean())


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest augmenting path with row/column potentials (Kuhn-Munkres), O(n^3).
    Returns ``col`` with row ``i`` assigned to column ``col[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row (1-based) owning column j; 0 = free
    way = np.zeros(n + 1, dtype=int)
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col = np.empty(n, dtype=int)
    col[match[1:] - 1] = np.arange(n)
    return col


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def wasserstein2(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between two equal-size empirical point sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point sets must have equal shape, got {a.shape} and {b.shape}")
    if a.shape[0] > W2_MAX_POINTS:
        raise ValueError(f"at most {W2_MAX_POINTS} points per side; use wasserstein2_blocked")
    cost = squared_distances(a, b)
    col = hungarian(cost)
    return float(np.sqrt(cost[np.arange(len(col)), col].mean()))


def wasserstein2_blocked(a: np.ndarray, b: np.ndarray, block: int = W2_MAX_POINTS) -> float:
    """Average exact W2 over disjoint blocks of at most ``block`` points."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"point sets must have equal shape, got {a.shape} and {b.shape}")
    n_blocks = max(1, -(-len(a) // block))
    chunks = np.array_split(np.arange(len(a)), n_blocks)
    return float(np.mean([wasserstein2(a[c], b[c]) for c in chunks]))


def transport_cost(x_from: np.ndarray, x_to: np.ndarray) -> float:
    """Mean squared displacement between paired rows."""
    x_from, x_to = np.asarray(x_from), np.asarray(x_to)
    if x_from.shape != x_to.shape:
        raise ValueError(f"shape mismatch {x_from.shape} vs {x_to.shape}")
    return float(np.mean(np.sum((x_to - x_from) ** 2, axis=1)))


def coupling_similarity(map_a: Callable, map_b: Callable, noise: np.ndarray, rng, n_perm: int = 16):
    """Paired MSE of two noise->data maps and the mean MSE after shuffling map_b's outputs."""
    ya, yb = np.asarray(map_a(noise)), np.asarray(map_b(noise))
    mse = transport_cost(ya, yb)
    baseline = float(np.mean([transport_cost(ya, yb[rng.permutation(len(yb))]) for _ in range(n_perm)]))
    return mse, baseline


@dataclass
class MetricReport:
    seed: int
    rows: list = field(default_factory=list)  # (metric, steps, value, n)

    def add(self, metric: str, steps, value: float, n: int) -> None:
        if not np.isfinite(value):
            raise FloatingPointError(f"metric {metric} at steps={steps} is not finite")
        self.rows.append((metric, steps, float(value), int(n)))

    def get(self, metric: str, steps) -> float:
        for m, s, v, _ in self.rows:
            if m == metric and s == steps:
                return v
        raise KeyError((metric, steps))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "steps", "value", "n", "seed"])
            for metric, steps, value, n in self.rows:
                w.writerow([metric, steps, repr(value), n, self.seed])
