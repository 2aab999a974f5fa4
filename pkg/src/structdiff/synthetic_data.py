"""Seeded 2D benchmark distributions and point-cloud CSV I/O.

Point batches are plain ``(N, d)`` float64 arrays throughout the package.
Every generator draws in a fixed unit-scale frame and the result is
standardised to zero mean and unit per-axis variance.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

VARIANTS = ("swiss_roll", "scattered_moon", "moon_circles", "central_banana")

DEFAULT_NOISE = {
    "swiss_roll": 0.03,
    "scattered_moon": 0.08,
    "moon_circles": 0.04,
    "central_banana": 0.08,
}

SWISS_ROLL_THETA = (1.5 * math.pi, 4.5 * math.pi)
SWISS_ROLL_SCALE = 4.5 * math.pi  # spiral radius is theta / scale, so at most 1
SCATTER_FRACTION = 0.08
BANANA_MODE_FRACTION = 0.15
BANANA_X_RANGE = (-1.5, 1.5)
BANANA_CURVATURE = 0.6
BANANA_MODE_STD = 0.15
BANANA_MODE_OFFSET = 1.1


class PointsFormatError(ValueError):
    """A points CSV could not be parsed."""


@dataclass(frozen=True)
class DatasetKind:
    variant: str = "swiss_roll"
    n_samples: int = 10000
    noise_level: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dataset {self.variant!r}; expected one of {VARIANTS}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_level is None:
            object.__setattr__(self, "noise_level", DEFAULT_NOISE[self.variant])
        if not math.isfinite(self.noise_level) or self.noise_level < 0:
            raise ValueError("noise_level must be finite and >= 0")

    def to_dict(self) -> dict:
        return {
            "dataset": self.variant,
            "n_samples": self.n_samples,
            "noise_level": self.noise_level,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetKind":
        return cls(
            variant=d.get("dataset", "swiss_roll"),
            n_samples=int(d.get("n_samples", 10000)),
            noise_level=d.get("noise_level"),
            seed=int(d.get("seed", 0)),
        )


def _swiss_roll(rng, n, noise):
    theta = rng.uniform(*SWISS_ROLL_THETA, size=n)
    pts = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) / SWISS_ROLL_SCALE
    return pts + noise * rng.standard_normal((n, 2))


def _moon(rng, n, noise, center=(0.0, 0.0)):
    s = rng.uniform(0.0, math.pi, size=n)
    pts = np.stack([np.cos(s), np.sin(s)], axis=1) + np.asarray(center)
    return pts + noise * rng.standard_normal((n, 2))


def _scattered_moon(rng, n, noise):
    n_scatter = int(round(SCATTER_FRACTION * n))
    moon = _moon(rng, n - n_scatter, noise)
    if len(moon):
        lo, hi = moon.min(axis=0), moon.max(axis=0)
    else:
        lo, hi = np.array([-1.0, 0.0]), np.array([1.0, 1.0])
    scatter = rng.uniform(lo, hi, size=(n_scatter, 2))
    return np.concatenate([moon, scatter])


def _circle(rng, n, radius, noise):
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def _moon_circles(rng, n, noise):
    n_moon = n // 3
    n_inner = (n - n_moon) // 2
    n_outer = n - n_moon - n_inner
    return np.concatenate([
        _moon(rng, n_moon, noise, center=(2.6, -0.3)),
        _circle(rng, n_inner, 0.5, noise),
        _circle(rng, n_outer, 1.0, noise),
    ])


def _banana_tail():
    x = BANANA_X_RANGE[0]
    y = BANANA_CURVATURE * x * x
    direction = np.array([-1.0, -2.0 * BANANA_CURVATURE * x])
    return np.array([x, y]), direction / np.linalg.norm(direction)


def banana_mode_center() -> np.ndarray:
    """Centre of the detached mode in the raw (unstandardised) frame."""
    tail, direction = _banana_tail()
    return tail + BANANA_MODE_OFFSET * direction


def _central_banana(rng, n, noise):
    n_mode = int(round(BANANA_MODE_FRACTION * n))
    n_lobe = n - n_mode
    # density along the lobe rises linearly from 1 at the left tail to 4 at the right end
    u = rng.uniform(size=n_lobe)
    frac = (np.sqrt(1.0 + 15.0 * u) - 1.0) / 3.0
    a, b = BANANA_X_RANGE
    x = a + (b - a) * frac
    y = BANANA_CURVATURE * x * x
    lobe = np.stack([x, y], axis=1) + noise * rng.standard_normal((n_lobe, 2))
    mode = banana_mode_center() + BANANA_MODE_STD * rng.standard_normal((n_mode, 2))
    return np.concatenate([lobe, mode])


_GENERATORS = {
    "swiss_roll": _swiss_roll,
    "scattered_moon": _scattered_moon,
    "moon_circles": _moon_circles,
    "central_banana": _central_banana,
}


def generate_raw(kind: DatasetKind) -> np.ndarray:
    """Draw ``kind.n_samples`` points in the generator frame, row order shuffled."""
    rng = np.random.default_rng(kind.seed)
    pts = _GENERATORS[kind.variant](rng, kind.n_samples, kind.noise_level)
    return pts[rng.permutation(len(pts))]


def standardize(points: np.ndarray) -> np.ndarray:
    mean = points.mean(axis=0)
    std = points.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (points - mean) / std


def generate(kind: DatasetKind) -> np.ndarray:
    """Standardised ``(n_samples, 2)`` batch; a pure function of ``kind``."""
    return standardize(generate_raw(kind))


def check_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty (N, d) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def save_points(points: np.ndarray, path: str | os.PathLike) -> None:
    points = check_points(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(points.shape[1])])
        for row in points:
            # repr gives the shortest string that round-trips exactly
            w.writerow([repr(float(v)) for v in row])


def load_points(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PointsFormatError(f"{path}: empty file") from None
        d = len(header)
        if d == 0 or header != [f"x{j}" for j in range(d)]:
            raise PointsFormatError(f"{path}:1: expected header x0,...,x{{d-1}}, got {header}")
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != d:
                raise PointsFormatError(
                    f"{path}:{lineno}: expected {d} columns, found {len(row)}"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise PointsFormatError(f"{path}:{lineno}: non-numeric cell in {row}") from None
            if not all(math.isfinite(v) for v in vals):
                raise PointsFormatError(f"{path}:{lineno}: non-finite value in {row}")
            rows.append(vals)
    if not rows:
        raise PointsFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)
