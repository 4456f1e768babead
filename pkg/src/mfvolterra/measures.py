"""Empirical measures, law flows and Wasserstein distances between point clouds.

All measures are uniform-weight clouds.  Distances between clouds of equal
size are exact: sorted coupling in one dimension, an optimal assignment in
several dimensions.  A sliced surrogate exists for large clouds in ``d >= 2``
and is always labelled as such.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ConfigError, DimensionMismatch, LengthMismatch, TooLarge
from .grid import TimeGrid

MAX_EXACT_N = 512


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigError(f"points must be an N x d array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform measure ``(1/N) sum_i delta_{x_i}`` on ``R^d``."""

    points: np.ndarray

    def __post_init__(self):
        arr = _as_points(self.points)
        if arr.shape[0] < 1:
            raise ConfigError("an empirical measure needs at least one point")
        if not np.isfinite(arr).all():
            raise ConfigError("empirical measure has non-finite coordinates")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        # exactly rounded, hence independent of the order of the points
        return np.array([math.fsum(col) / self.N for col in self.points.T.tolist()])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.d)])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]))


@dataclass(frozen=True, eq=False)
class LawFlow:
    """One cloud of equal size per grid node, stored as an ``(n+1, N, d)`` array."""

    grid: TimeGrid
    clouds: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.clouds, dtype=float)
        if arr.ndim != 3 or arr.shape[0] != self.grid.n_steps + 1:
            raise ConfigError(f"law flow needs shape (n_steps+1, N, d), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "clouds", arr)

    @classmethod
    def constant(cls, grid: TimeGrid, points) -> "LawFlow":
        pts = _as_points(points)
        return cls(grid, np.broadcast_to(pts, (grid.n_steps + 1,) + pts.shape).copy())

    @property
    def N(self) -> int:
        return self.clouds.shape[1]

    @property
    def d(self) -> int:
        return self.clouds.shape[2]

    def measure(self, k: int) -> EmpiricalMeasure:
        return self._measures[k]

    @cached_property
    def _measures(self) -> list:
        return [EmpiricalMeasure(c) for c in self.clouds]

    @property
    def measures(self) -> list:
        return list(self._measures)

    @cached_property
    def means(self) -> np.ndarray:
        return np.stack([m.mean for m in self._measures])


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------
def _check_p(p: float):
    if not p >= 1.0:
        raise ConfigError(f"Wasserstein order must be >= 1, got {p}")


def wasserstein_1d(p: float, xs, ys) -> float:
    """Exact ``W_p`` between two equal-size samples on the line (sorted coupling)."""
    _check_p(p)
    x = np.sort(np.asarray(xs, dtype=float).ravel())
    y = np.sort(np.asarray(ys, dtype=float).ravel())
    if x.shape != y.shape:
        raise LengthMismatch(f"sample sizes differ: {x.size} vs {y.size}")
    return float(np.mean(np.abs(x - y) ** p) ** (1.0 / p))


def wasserstein_1d_power(p: float, xs, ys) -> float:
    """``W_p^p`` for 1-d samples without the final root (avoids a pow round trip)."""
    x = np.sort(np.asarray(xs, dtype=float).ravel())
    y = np.sort(np.asarray(ys, dtype=float).ravel())
    if x.shape != y.shape:
        raise LengthMismatch(f"sample sizes differ: {x.size} vs {y.size}")
    return float(np.mean(np.abs(x - y) ** p))


def _pair(mu, nu):
    a = mu.points if isinstance(mu, EmpiricalMeasure) else _as_points(mu)
    b = nu.points if isinstance(nu, EmpiricalMeasure) else _as_points(nu)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(f"sample sizes differ: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def assignment_cost(p: float, a: np.ndarray, b: np.ndarray) -> float:
    """Mean cost of the optimal assignment with cost ``|x_i - y_j|^p``."""
    cost = cdist(a, b) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def wasserstein_exact(p: float, mu, nu, max_n: int = MAX_EXACT_N) -> float:
    """Exact ``W_p`` between equal-size clouds via an optimal assignment."""
    _check_p(p)
    a, b = _pair(mu, nu)
    if a.shape[0] > max_n:
        raise TooLarge(f"N={a.shape[0]} exceeds {max_n}; use wasserstein_sliced for large clouds")
    return assignment_cost(p, a, b) ** (1.0 / p)


def random_directions(d: int, n: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _project(a: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # elementwise accumulation in fixed coordinate order: independent of row position
    out = a[:, 0, None] * dirs[None, :, 0]
    for c in range(1, a.shape[1]):
        out += a[:, c, None] * dirs[None, :, c]
    return out


def sliced_power(p: float, a: np.ndarray, b: np.ndarray, n_projections: int, seed: int) -> float:
    dirs = random_directions(a.shape[1], n_projections, seed)
    pa = np.sort(_project(a, dirs), axis=0)
    pb = np.sort(_project(b, dirs), axis=0)
    return float(np.mean(np.abs(pa - pb) ** p))


def wasserstein_sliced(p: float, mu, nu, n_projections: int = 128, seed: int = 0) -> float:
    """Sliced ``W_p``: root of the mean of 1-d ``W_p^p`` over random directions."""
    _check_p(p)
    a, b = _pair(mu, nu)
    return sliced_power(p, a, b, n_projections, seed) ** (1.0 / p)


def moment(mu, q: float) -> float:
    """``(1/N) sum_i |x_i|^q`` with the Euclidean norm."""
    if not q >= 1.0:
        raise ConfigError(f"moment order must be >= 1, got {q}")
    pts = mu.points if isinstance(mu, EmpiricalMeasure) else _as_points(mu)
    return float(np.mean(np.linalg.norm(pts, axis=1) ** q))


# ---------------------------------------------------------------------------
# estimator selection
# ---------------------------------------------------------------------------
SORTED_1D = "sorted-1d"
EXACT = "exact"
_SLICED = re.compile(r"^sliced\((\d+)\)$")


def choose_estimator(d: int, n_max: int, policy: str = "auto", n_projections: int = 128) -> str:
    """Pick one estimator label for a whole experiment (never mixed across rows)."""
    if policy == "auto":
        if d == 1:
            return SORTED_1D
        return EXACT if n_max <= MAX_EXACT_N else f"sliced({n_projections})"
    if policy == EXACT:
        if d == 1:
            return SORTED_1D
        if n_max > MAX_EXACT_N:
            raise TooLarge(f"exact estimator requested but N={n_max} > {MAX_EXACT_N}")
        return EXACT
    if policy == "sliced":
        return f"sliced({n_projections})"
    if policy in (SORTED_1D,) or _SLICED.match(policy):
        return policy
    raise ConfigError(f"unknown estimator policy {policy!r}")


def distance_power(estimator: str, p: float, a: np.ndarray, b: np.ndarray, seed: int = 0,
                   max_n: int = MAX_EXACT_N) -> float:
    """``W_p^p`` between equal-size clouds using the named estimator."""
    if estimator == SORTED_1D:
        if a.shape[1] != 1:
            raise DimensionMismatch("sorted-1d estimator needs d = 1")
        return wasserstein_1d_power(p, a[:, 0], b[:, 0])
    if estimator == EXACT:
        if a.shape[0] > max_n:
            raise TooLarge(f"N={a.shape[0]} exceeds {max_n}")
        return assignment_cost(p, a, b)
    m = _SLICED.match(estimator)
    if m:
        return sliced_power(p, a, b, int(m.group(1)), seed)
    raise ConfigError(f"unknown estimator {estimator!r}")


def subsample(n_total: int, n: int, rng: np.random.Generator, replace: bool = False) -> np.ndarray:
    """Indices of a seeded subsample of size ``n`` (without replacement when possible)."""
    if not replace and n > n_total:
        replace = True
    return np.sort(rng.choice(n_total, size=n, replace=replace))


def write_law_csv(law: LawFlow, path) -> None:
    """One row per (node, point): ``k, t, x0..x{d-1}``."""
    path = Path(path)
    t = law.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"x{i}" for i in range(law.d)])
        for k, cloud in enumerate(law.clouds):
            for row in cloud:
                w.writerow([k, repr(float(t[k]))] + [repr(float(v)) for v in row])
