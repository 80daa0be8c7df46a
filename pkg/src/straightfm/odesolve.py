"""Fixed-step Euler/Heun and adaptive Dormand-Prince integrators for dx/dt = f(x, t)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numcore import NumericFault

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class Trajectory:
    times: np.ndarray  # (K,)
    states: np.ndarray  # (K, n, d)
    solver: str
    accepted: int
    rejected: int = 0
    evaluations: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]


def _check(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite state after step {step}")


def _fixed_grid(span, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    ta, tb = span
    grid = np.array([i / n_steps * (tb - ta) + ta for i in range(n_steps + 1)])
    grid[-1] = tb  # the formula can miss the endpoint by an ulp
    return grid


def euler(field: Field, x_init, span=(0.0, 1.0), n_steps: int = 100) -> Trajectory:
    times = _fixed_grid(span, n_steps)
    h = (span[1] - span[0]) / n_steps
    x = np.array(x_init, dtype=np.float64)
    states = [x]
    for i in range(n_steps):
        x = x + h * field(x, times[i])
        _check(x, i)
        states.append(x)
    return Trajectory(times, np.stack(states), "euler", n_steps, 0, n_steps)


def heun(field: Field, x_init, span=(0.0, 1.0), n_steps: int = 50) -> Trajectory:
    """Explicit trapezoidal rule (Heun's second-order method)."""
    times = _fixed_grid(span, n_steps)
    h = (span[1] - span[0]) / n_steps
    x = np.array(x_init, dtype=np.float64)
    states = [x]
    for i in range(n_steps):
        k1 = field(x, times[i])
        k2 = field(x + h * k1, times[i + 1])
        x = x + 0.5 * h * (k1 + k2)
        _check(x, i)
        states.append(x)
    return Trajectory(times, np.stack(states), "heun", n_steps, 0, 2 * n_steps)


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def rk45(field: Field, x_init, span=(0.0, 1.0), rtol: float = 1e-5, atol: float = 1e-5,
         max_steps: int = 100_000) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with max-norm error control.

    A step is accepted when every component satisfies
    ``|err| <= atol + rtol * max(|x|, |x_new|)``. The first step is span/100
    and each new step is the old one times ``0.9 * (1/err)**(1/5)`` clipped
    to [0.2, 5].
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    ta, tb = float(span[0]), float(span[1])
    length = tb - ta
    if length == 0:
        raise ValueError("degenerate integration span")
    direction = np.sign(length)
    h = length / 100.0
    h_floor = 1e-12 * abs(length)
    t = ta
    x = np.array(x_init, dtype=np.float64)
    times, states = [t], [x]
    accepted = rejected = nfev = 0
    k = [None] * 7
    k[0] = field(x, t)
    nfev += 1
    while direction * (tb - t) > 0:
        if accepted + rejected >= max_steps:
            raise NumericFault(f"rk45 exceeded {max_steps} steps")
        if direction * (t + h - tb) > 0:
            h = tb - t
        for s in range(1, 7):
            dx = sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            k[s] = field(x + h * dx, t + _C[s] * h)
        nfev += 6
        x_new = x + h * sum(b * k[j] for j, b in enumerate(_B5) if b != 0.0)
        err = h * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        ratio = float(np.max(np.abs(err) / scale)) if err.size else 0.0
        if not np.isfinite(ratio):
            raise NumericFault(f"non-finite error estimate at t={t}")
        factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
        if ratio <= 1.0:
            t_next = tb if abs(tb - (t + h)) <= 1e-14 * abs(length) else t + h
            t, x = t_next, x_new
            _check(x, accepted)
            times.append(t)
            states.append(x)
            accepted += 1
            k[0] = k[6]  # first-same-as-last
        else:
            rejected += 1
        h *= factor
        if abs(h) < h_floor and direction * (tb - t) > 0:
            raise NumericFault(f"rk45 step size underflow at t={t}")
    return Trajectory(np.array(times), np.stack(states), "rk45", accepted, rejected, nfev)


def solve(field: Field, x_init, span=(0.0, 1.0), solver: str = "euler", n_steps: int = 100,
          rtol: float = 1e-5, atol: float = 1e-5) -> Trajectory:
    if solver == "euler":
        return euler(field, x_init, span, n_steps)
    if solver == "heun":
        return heun(field, x_init, span, n_steps)
    if solver == "rk45":
        return rk45(field, x_init, span, rtol, atol)
    raise ValueError(f"unknown solver {solver!r}; choose euler, heun or rk45")


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """One block of ``len(times)`` rows per sample, columns ``t,x0,x1,...``."""
    n, d = traj.states.shape[1:]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{j}" for j in range(d)])
        for i in range(n):
            for t, state in zip(traj.times, traj.states[:, i]):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in state])
