"""2-D toy target distributions and the Gaussian prior."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASETS = ("two_moons", "eight_gaussians", "checkerboard", "spiral")

# default component noise, as a fraction of ``scale``
_DEFAULT_NOISE = {"two_moons": 0.05, "eight_gaussians": 0.02, "checkerboard": 0.0, "spiral": 0.02}


class Rng:
    """Seeded counter-based uniform stream with Box-Muller normals.

    Uniforms come from numpy's Philox generator keyed by ``(seed, stream)``,
    so independent workers can take distinct stream ids.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.stream])))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def uniform(self, shape) -> np.ndarray:
        """Uniform on [0, 1)."""
        return self._gen.random(shape)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n].reshape(shape)

    def integers(self, high: int, size) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "eight_gaussians"
    scale: float = 2.0
    noise_std: float | None = None

    def __post_init__(self):
        if self.kind not in DATASETS:
            raise ValueError(f"unknown dataset {self.kind!r}; choose from {', '.join(DATASETS)}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    @property
    def noise(self) -> float:
        if self.noise_std is None:
            return _DEFAULT_NOISE[self.kind] * self.scale
        return self.noise_std


def sample_prior(rng: Rng, n: int, d: int = 2) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    return rng.normal((n, d))


def eight_gaussian_centers(scale: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(8) / 8
    return scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def moon_centroids(scale: float) -> np.ndarray:
    """Centroids of the upper and lower moon (used to check the class balance)."""
    c = 2.0 / np.pi
    upper = np.array([0.0, c])
    lower = np.array([1.0, 0.5 - c])
    return scale * (np.stack([upper, lower]) - np.array([0.5, 0.25]))


def checkerboard_allowed(x: np.ndarray, scale: float) -> np.ndarray:
    """True where a point falls in an occupied checkerboard cell."""
    cell = scale / 2.0
    idx = np.floor((x + scale) / cell).astype(int)
    inside = np.all((idx >= 0) & (idx <= 3), axis=1)
    return inside & ((idx[:, 0] + idx[:, 1]) % 2 == 0)


def sample_data(rng: Rng, spec: DatasetSpec, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    s, sigma = spec.scale, spec.noise
    if spec.kind == "eight_gaussians":
        centers = eight_gaussian_centers(s)
        pts = centers[rng.integers(8, n)]
    elif spec.kind == "two_moons":
        theta = np.pi * rng.uniform(n)
        lower = rng.uniform(n) < 0.5
        x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
        y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
        pts = s * (np.stack([x, y], axis=1) - np.array([0.5, 0.25]))
    elif spec.kind == "checkerboard":
        cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0], dtype=float)
        chosen = cells[rng.integers(len(cells), n)]
        pts = (chosen + rng.uniform((n, 2))) * (s / 2.0) - s
    else:  # spiral
        theta = 3.0 * np.pi * rng.uniform(n)
        r = theta / (3.0 * np.pi)
        arm = np.where(rng.uniform(n) < 0.5, 0.0, np.pi)
        pts = s * np.stack([r * np.cos(theta + arm), r * np.sin(theta + arm)], axis=1)
    if sigma > 0:
        pts = pts + sigma * rng.normal((n, 2))
    return pts


def write_points_csv(path, points: np.ndarray, prefix: str = "x", header=None) -> None:
    points = np.asarray(points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header or [f"{prefix}{j}" for j in range(points.shape[1])])
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    return np.array([[float(v) for v in line.split(",")] for line in text[1:] if line], dtype=np.float64)
