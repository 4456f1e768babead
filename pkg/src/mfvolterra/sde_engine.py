"""Explicit Euler scheme for stochastic Volterra equations with a frozen law flow.

For each path ``i`` and node ``t_k``::

    X_k = X_0 + sum_{j<k} wmu[k, j] * mu(t_j, X_j, rho_j)
              + sum_{j<k} wsig[k, j] * sigma(t_j, X_j[, rho_j]) * dB_j

The whole history sum is recomputed at every node since the weights depend on
``k``.  Only elementwise array operations touch path data, always in the same
order, so a path's trajectory is bit-for-bit independent of which other paths
share its batch, of their order, and of the number of worker threads.

Randomness comes from counter-based Philox streams keyed by
``(master_seed, path_index)``; initial conditions use a separate counter domain
of the same key.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Annotated, Callable, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .coefficients import DiffusionSpec, DriftSpec, Zero
from .errors import (ConfigError, DimensionMismatch, InvalidDiagnostic, NonFiniteState)
from .grid import TimeGrid
from .kernels import KernelSpec, WeightMode, default_mode, geometric_ratio, weight_matrix
from .measures import EmpiricalMeasure, LawFlow

DEFAULT_CHUNK = 8192
_MASK64 = (1 << 64) - 1
_INIT_DOMAIN = 1


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoisePlan:
    """Reproducible Brownian increments, one independent stream per path index.

    ``resolution`` > 1 draws the increments on a grid ``resolution`` times finer
    and sums them, so a coarse grid can share the Brownian path of a fine one.
    """

    master_seed: int
    resolution: int = 1

    def __post_init__(self):
        if self.resolution < 1:
            raise ConfigError("resolution must be >= 1")

    def generator(self, index: int, domain: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(key=[self.master_seed & _MASK64, int(index) & _MASK64],
                                  counter=[0, 0, 0, domain])
        return np.random.Generator(bitgen)

    def increments_for(self, index: int, grid: TimeGrid, d: int) -> np.ndarray:
        """``(n_steps, d)`` increments of path ``index``."""
        r = self.resolution
        z = self.generator(index).standard_normal((grid.n_steps * r, d))
        fine = z * math.sqrt(grid.dt / r)
        if r == 1:
            return fine
        return fine.reshape(grid.n_steps, r, d).sum(axis=1)

    def increments(self, indices: Sequence[int], grid: TimeGrid, d: int) -> np.ndarray:
        """Time-major ``(n_steps, len(indices), d)`` increment array."""
        out = np.empty((grid.n_steps, len(indices), d))
        for c, i in enumerate(indices):
            out[:, c, :] = self.increments_for(i, grid, d)
        return out

    def init_generator(self, index: int) -> np.random.Generator:
        return self.generator(index, _INIT_DOMAIN)

    def refined(self, factor: int = 2) -> "NoisePlan":
        return NoisePlan(self.master_seed, self.resolution * factor)


def increments_checksum(dB: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(dB).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# initial laws
# ---------------------------------------------------------------------------
def _tuple(v):
    if isinstance(v, (int, float)):
        return (float(v),)
    return tuple(float(x) for x in v)


class _Sampler(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def sample_paths(self, noise: NoisePlan, indices: Sequence[int]) -> np.ndarray:
        """Initial states of the given paths, each from its own init sub-stream."""
        out = np.empty((len(indices), self.dim))
        for c, i in enumerate(indices):
            out[c] = self.draw(noise.init_generator(i), 1)[0]
        return out


class Dirac(_Sampler):
    family: Literal["dirac"] = "dirac"
    x0: tuple[float, ...]

    _v = field_validator("x0", mode="before")(lambda cls, v: _tuple(v))

    @property
    def dim(self) -> int:
        return len(self.x0)

    @property
    def degenerate(self) -> bool:
        return True

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(np.array(self.x0), (n, 1))


class Gaussian(_Sampler):
    """Independent normal coordinates with the given means and standard deviations."""

    family: Literal["gaussian"] = "gaussian"
    mean: tuple[float, ...]
    sd: tuple[float, ...] = (1.0,)

    _v = field_validator("mean", "sd", mode="before")(lambda cls, v: _tuple(v))

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.sd) not in (1, len(self.mean)):
            raise ValueError("sd must be a scalar or match the length of mean")
        if any(s < 0 for s in self.sd):
            raise ValueError("sd must be non-negative")
        return self

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def degenerate(self) -> bool:
        return all(s == 0 for s in self.sd)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return np.array(self.mean) + np.array(self.sd) * z


class Uniform(_Sampler):
    family: Literal["uniform"] = "uniform"
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    _v = field_validator("lo", "hi", mode="before")(lambda cls, v: _tuple(v))

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.lo) != len(self.hi) or any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("need len(lo) == len(hi) and lo <= hi")
        return self

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def degenerate(self) -> bool:
        return self.lo == self.hi

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = np.array(self.lo), np.array(self.hi)
        return lo + (hi - lo) * rng.random((n, self.dim))


class TwoPoint(_Sampler):
    """Each coordinate independently equals ``a`` with probability ``p``, else ``b``."""

    family: Literal["two_point"] = "two_point"
    a: tuple[float, ...] = (0.0,)
    b: tuple[float, ...] = (1.0,)
    p: float = Field(0.5, ge=0.0, le=1.0)

    _v = field_validator("a", "b", mode="before")(lambda cls, v: _tuple(v))

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.a) != len(self.b):
            raise ValueError("a and b must have the same length")
        return self

    @property
    def dim(self) -> int:
        return len(self.a)

    @property
    def degenerate(self) -> bool:
        return self.a == self.b or self.p in (0.0, 1.0)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.dim))
        return np.where(u < self.p, np.array(self.a), np.array(self.b))


InitSampler = Annotated[Union[Dirac, Gaussian, Uniform, TwoPoint], Field(discriminator="family")]


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------
class VolterraModel(BaseModel):
    """Kernels, coefficients and the diffusion weight rule of one equation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    K_mu: KernelSpec
    K_sigma: KernelSpec
    drift: DriftSpec
    diffusion: DiffusionSpec
    diffusion_mode: Optional[WeightMode] = None

    @property
    def mode(self) -> WeightMode:
        return self.diffusion_mode or default_mode(self.K_sigma)

    @property
    def uses_measure(self) -> bool:
        return self.drift.uses_measure or self.diffusion.requires_measure

    def weights(self, grid: TimeGrid):
        return _weights(self.K_mu, grid, "drift", None), _weights(self.K_sigma, grid, "diffusion", self.mode)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:16]


@lru_cache(maxsize=64)
def _weights(kernel, grid: TimeGrid, kind: str, mode) -> np.ndarray:
    W = weight_matrix(kernel, grid, kind, mode)
    W.setflags(write=False)
    return W


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class PathEnsemble:
    """Simulated paths, stored time-major as ``(n_steps+1, M, d)``.

    ``states`` exposes the path-major ``(M, n_steps+1, d)`` view.  The drift
    values ``mu(t_j, X_j, rho_j)``, diffusion terms ``sigma(...) * dB_j`` and
    increments are kept (time-major) unless the run dropped them to save memory.
    """

    grid: TimeGrid
    states_tm: np.ndarray
    drift_values: Optional[np.ndarray] = None
    diffusion_terms: Optional[np.ndarray] = None
    increments: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @property
    def states(self) -> np.ndarray:
        return self.states_tm.transpose(1, 0, 2)

    @property
    def M(self) -> int:
        return self.states_tm.shape[1]

    @property
    def d(self) -> int:
        return self.states_tm.shape[2]

    @property
    def initial(self) -> np.ndarray:
        return self.states_tm[0]

    def law(self) -> LawFlow:
        return LawFlow(self.grid, self.states_tm)

    def to_csv(self, path) -> None:
        """Row = path; columns = nodes, node-major blocks of ``d`` when ``d > 1``."""
        meta = self.metadata
        with open(path, "w", newline="") as fh:
            fh.write(f"# T={self.grid.T!r} n_steps={self.grid.n_steps} d={self.d} "
                     f"seed={meta.get('seed')} spec_hash={meta.get('spec_hash')}\n")
            w = csv.writer(fh)
            w.writerow([f"t{k}_x{c}" for k in range(self.grid.n_steps + 1) for c in range(self.d)])
            for row in self.states.reshape(self.M, -1):
                w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# scheme
# ---------------------------------------------------------------------------
def march(model: VolterraModel, grid: TimeGrid, x0: np.ndarray, dB: np.ndarray,
          measure_at: Callable[[int, np.ndarray], Optional[EmpiricalMeasure]],
          fast_path: bool = False, first_index: int = 0, paths: Optional[Sequence[int]] = None):
    """Run the scheme on one batch.

    Parameters
    ----------
    x0 : (M, d) initial states.
    dB : (n_steps, M, d) increments.
    measure_at : callable ``(k, X_k) -> measure`` giving ``rho_{t_k}``.
    fast_path : use running sums when both kernels have a geometric ratio.
    paths : global path labels used in error reports.

    Returns
    -------
    X, F, G : time-major states, drift values and diffusion terms.
    """
    n = grid.n_steps
    M, d = x0.shape
    if dB.shape != (n, M, d):
        raise DimensionMismatch(f"increments have shape {dB.shape}, expected {(n, M, d)}")
    Wmu, Wsig = model.weights(grid)
    drift, diffusion = model.drift, model.diffusion
    skip_drift = isinstance(drift, Zero)
    t = grid.nodes

    X = np.empty((n + 1, M, d))
    F = np.zeros((n, M, d))
    G = np.empty((n, M, d))
    X[0] = x0
    tmp = np.empty((M, d))

    ratios = (geometric_ratio(model.K_mu, grid), geometric_ratio(model.K_sigma, grid))
    use_fast = fast_path and None not in ratios
    if use_fast:
        Smu = np.zeros((M, d))
        Ssig = np.zeros((M, d))

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            rho = measure_at(k, X[k])
            if not skip_drift:
                F[k] = drift.evaluate(t[k], X[k], rho)
            np.multiply(diffusion.diagonal(t[k], X[k], rho), dB[k], out=G[k])
            acc = X[k + 1]
            if use_fast:
                # w[k+1, j] = r * w[k, j] for j < k
                Smu *= ratios[0]
                Smu += Wmu[k + 1, k] * F[k]
                Ssig *= ratios[1]
                Ssig += Wsig[k + 1, k] * G[k]
                np.add(X[0], Smu, out=acc)
                acc += Ssig
            else:
                acc[...] = X[0]
                wm, ws = Wmu[k + 1], Wsig[k + 1]
                for j in range(k + 1):
                    if not skip_drift:
                        np.multiply(F[j], wm[j], out=tmp)
                        acc += tmp
                    np.multiply(G[j], ws[j], out=tmp)
                    acc += tmp
            bad = ~np.isfinite(acc)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                label = paths[row] if paths is not None else first_index + row
                raise NonFiniteState(path=int(label), step=k + 1)
    return X, F, G


def _chunks(M: int, size: int):
    return [range(a, min(a + size, M)) for a in range(0, M, size)]


def run_parallel(fn, items, threads: int):
    """Ordered map; results do not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def simulate_frozen_law(grid: TimeGrid, model: VolterraModel, law: LawFlow, init, noise: NoisePlan,
                        M: int, *, indices: Optional[Sequence[int]] = None, fast_path: bool = False,
                        threads: int = 1, chunk_size: int = DEFAULT_CHUNK,
                        keep_records: bool = True) -> PathEnsemble:
    """Simulate ``M`` paths of the equation with the law flow held fixed.

    Path ``c`` uses noise stream ``indices[c]`` (default ``c``) for both its
    increments and its initial draw.
    """
    if law.grid != grid:
        raise ConfigError("law flow grid differs from simulation grid")
    if M < 1:
        raise ConfigError("M must be >= 1")
    if law.d != init.dim:
        raise DimensionMismatch(f"law has d={law.d} but initial law has d={init.dim}")
    indices = list(range(M)) if indices is None else [int(i) for i in indices]
    if len(indices) != M:
        raise ConfigError("len(indices) must equal M")
    d = init.dim
    measures = law.measures if model.uses_measure else None

    def measure_at(k, Xk):
        return measures[k] if measures is not None else None

    def work(rows):
        idx = [indices[r] for r in rows]
        x0 = init.sample_paths(noise, idx)
        dB = noise.increments(idx, grid, d)
        X, F, G = march(model, grid, x0, dB, measure_at, fast_path, paths=idx)
        return (X, F, G, dB) if keep_records else (X,)

    parts = run_parallel(work, _chunks(M, chunk_size), threads)
    joined = [np.concatenate([p[i] for p in parts], axis=1) if len(parts) > 1 else parts[0][i]
              for i in range(len(parts[0]))]
    meta = _metadata(grid, model, noise, init, "frozen_law", fast_path)
    if keep_records:
        return PathEnsemble(grid, joined[0], joined[1], joined[2], joined[3], meta)
    return PathEnsemble(grid, joined[0], metadata=meta)


def _metadata(grid, model, noise, init, kind, fast_path) -> dict:
    return {
        "kind": kind,
        "seed": noise.master_seed,
        "resolution": noise.resolution,
        "T": grid.T,
        "n_steps": grid.n_steps,
        "model": json.loads(model.model_dump_json()),
        "init": json.loads(init.model_dump_json()),
        "spec_hash": model.spec_hash(),
        "fast_path": fast_path,
    }


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MartingaleReport:
    means: np.ndarray
    standard_errors: np.ndarray
    node_passed: np.ndarray
    passed: bool
    inconclusive: bool


def martingale_check(ensemble: PathEnsemble, z: float = 4.0) -> MartingaleReport:
    """Check that ``E[X_t - X_0] = 0`` at every node within ``z`` standard errors."""
    model = ensemble.metadata.get("model", {})
    if model.get("drift", {}).get("family") != "zero" or model.get("K_sigma", {}).get("family") != "constant":
        raise InvalidDiagnostic("martingale check needs zero drift and a constant diffusion kernel")
    inc = ensemble.states_tm - ensemble.states_tm[0]
    means = inc.mean(axis=1)
    n1 = ensemble.grid.n_steps + 1
    if ensemble.M < 2:
        nan = np.full_like(means, np.nan)
        return MartingaleReport(means, nan, np.zeros(means.shape, bool), False, True)
    se = inc.std(axis=1, ddof=1) / math.sqrt(ensemble.M)
    ok = np.abs(means) <= z * se
    # nodes with zero spread (e.g. t_0) pass when the mean is exactly 0
    return MartingaleReport(means, se, ok, bool(ok.all()) and ok.shape[0] == n1, False)
