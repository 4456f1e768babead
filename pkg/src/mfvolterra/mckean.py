"""Mean-field Volterra equations: Picard iteration on the law flow, the
interacting particle system, and synchronously coupled (particle, limit) pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import AdmissibilityError, ConfigError, NotConverged, ReferenceTooSmall
from .grid import TimeGrid
from .measures import LawFlow, EmpiricalMeasure, choose_estimator, distance_power
from .sde_engine import (NoisePlan, PathEnsemble, VolterraModel, _metadata, march,
                         run_parallel, simulate_frozen_law)

# seed-derivation domains
PICARD = 1
COUPLING = 2
SUBSAMPLE = 3


def derive_seed(master_seed: int, *tags: int) -> int:
    """64-bit child seed of ``master_seed`` for a tagged purpose."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class PicardConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    M_law: int = Field(8192, ge=2)
    tol: float = Field(1e-6, gt=0.0)
    max_iters: int = Field(50, ge=1)
    delta: float = Field(2.0, ge=1.0)
    common_random_numbers: bool = True
    estimator: str = "auto"


@dataclass(eq=False)
class PicardResult:
    law: LawFlow
    iterations_used: int
    gap_history: list
    converged: bool
    estimator: str
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "gap_history": [float(g) for g in self.gap_history],
            "converged": self.converged,
            "estimator": self.estimator,
            "terminal_mean": self.law.means[-1].tolist(),
            "metadata": self.metadata,
        }


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------
def check_admissibility(model: VolterraModel, d: int) -> str:
    """Return ``"lipschitz"`` or ``"holder_1d"``; raise if neither setting applies.

    Lipschitz diffusions are accepted in any dimension.  A merely Hoelder
    diffusion needs ``d = 1``, a measure-free diffusion and regular
    (non-singular) convolution kernels.
    """
    if model.diffusion.holder_exponent == 1.0:
        return "lipschitz"
    problems = []
    if d != 1:
        problems.append(f"d={d} (needs 1)")
    if model.diffusion.requires_measure:
        problems.append("diffusion depends on the measure")
    for name, K in (("K_mu", model.K_mu), ("K_sigma", model.K_sigma)):
        if K.is_singular or not K.is_convolutional:
            problems.append(f"{name} is not a regular convolution kernel")
    if problems:
        raise AdmissibilityError("Hoelder diffusion outside the one-dimensional setting: " + "; ".join(problems))
    return "holder_1d"


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------
def flow_gap(a: LawFlow, b: LawFlow, delta: float, estimator: str, threads: int = 1) -> float:
    """``max_k W_delta(a_k, b_k)`` over grid nodes."""
    def one(k):
        return distance_power(estimator, delta, a.clouds[k], b.clouds[k], seed=k)
    powers = run_parallel(one, range(a.grid.n_steps + 1), threads)
    return max(powers) ** (1.0 / delta)


def picard_noise(master_seed: int, iteration: int, crn: bool) -> NoisePlan:
    return NoisePlan(derive_seed(master_seed, PICARD, 0 if crn else iteration))


def solution_map(grid: TimeGrid, model: VolterraModel, law: LawFlow, init, noise: NoisePlan,
                 M: int, threads: int = 1, fast_path: bool = False) -> LawFlow:
    """One application of the solution map: the law flow of the frozen-law equation."""
    ens = simulate_frozen_law(grid, model, law, init, noise, M, threads=threads,
                              fast_path=fast_path, keep_records=False)
    return ens.law()


def picard_solve(grid: TimeGrid, model: VolterraModel, init, cfg: PicardConfig, master_seed: int,
                 *, threads: int = 1, raise_on_failure: bool = True,
                 fast_path: bool = False) -> PicardResult:
    """Iterate the solution map from the constant flow of the initial law."""
    setting = check_admissibility(model, init.dim)
    estimator = choose_estimator(init.dim, cfg.M_law, cfg.estimator)
    noise0 = picard_noise(master_seed, 0, True)
    law = LawFlow.constant(grid, init.sample_paths(noise0, range(cfg.M_law)))
    gaps = []
    converged = False
    for it in range(1, cfg.max_iters + 1):
        noise = picard_noise(master_seed, it, cfg.common_random_numbers)
        new = solution_map(grid, model, law, init, noise, cfg.M_law, threads, fast_path)
        gaps.append(flow_gap(new, law, cfg.delta, estimator, threads))
        law = new
        if gaps[-1] < cfg.tol:
            converged = True
            break
    meta = {"master_seed": master_seed, "M_law": cfg.M_law, "delta": cfg.delta,
            "common_random_numbers": cfg.common_random_numbers, "setting": setting,
            "tol": cfg.tol}
    result = PicardResult(law, len(gaps), gaps, converged, estimator, meta)
    if not converged and raise_on_failure:
        raise NotConverged(gaps)
    return result


# ---------------------------------------------------------------------------
# particle system
# ---------------------------------------------------------------------------
def simulate_particle_system(N: int, grid: TimeGrid, model: VolterraModel, init, noise: NoisePlan,
                             *, indices: Optional[Sequence[int]] = None,
                             init_indices: Optional[Sequence[int]] = None,
                             fast_path: bool = False) -> PathEnsemble:
    """The ``N``-particle system driven by the empirical measure of the current states.

    Particle ``c`` draws its increments from stream ``indices[c]`` and its
    initial state from ``init_indices[c]`` (both default to ``c``).
    """
    if N < 1:
        raise ConfigError("N must be >= 1")
    indices = list(range(N)) if indices is None else [int(i) for i in indices]
    init_indices = indices if init_indices is None else [int(i) for i in init_indices]
    if len(indices) != N or len(init_indices) != N:
        raise ConfigError("index lists must have length N")
    x0 = init.sample_paths(noise, init_indices)
    dB = noise.increments(indices, grid, init.dim)
    uses = model.uses_measure

    def measure_at(k, Xk):
        return EmpiricalMeasure(Xk) if uses else None

    X, F, G = march(model, grid, x0, dB, measure_at, fast_path, paths=indices)
    meta = _metadata(grid, model, noise, init, "particle_system", fast_path)
    return PathEnsemble(grid, X, F, G, dB, meta)


def exchangeability_check(N: int, grid: TimeGrid, model: VolterraModel, init, master_seed: int,
                          permutation: Sequence[int], permute_init: bool = True) -> bool:
    """Re-run with permuted streams and compare to the permuted original, bit for bit."""
    perm = np.asarray(permutation, dtype=int)
    if sorted(perm.tolist()) != list(range(N)):
        raise ConfigError("permutation must be a bijection of 0..N-1")
    noise = NoisePlan(master_seed)
    base = simulate_particle_system(N, grid, model, init, noise)
    rerun = simulate_particle_system(N, grid, model, init, noise, indices=perm,
                                     init_indices=perm if permute_init else range(N))
    return bool(np.array_equal(rerun.states_tm, base.states_tm[:, perm, :]))


# ---------------------------------------------------------------------------
# synchronous coupling
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class CouplingResult:
    """Per-node error curves averaged over replications.

    ``reference_companion`` is ``W_delta^delta`` between two disjoint
    ``N``-subsamples of the reference cloud; ``debiased`` subtracts it from
    ``wasserstein_error``.
    """

    N: int
    delta: float
    t: np.ndarray
    mean_pathwise_error: np.ndarray
    wasserstein_error: np.ndarray
    reference_companion: np.ndarray
    debiased: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "delta": self.delta,
            "t": self.t.tolist(),
            "mean_pathwise_error": self.mean_pathwise_error.tolist(),
            "wasserstein_error": self.wasserstein_error.tolist(),
            "reference_companion": self.reference_companion.tolist(),
            "debiased": self.debiased.tolist(),
            "metadata": self.metadata,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def rows(self):
        """``(t, metric, value)`` rows in a fixed order."""
        for name in ("mean_pathwise_error", "wasserstein_error", "reference_companion", "debiased"):
            for tk, v in zip(self.t, getattr(self, name)):
                yield float(tk), name, float(v)


def coupling_replication(N: int, grid: TimeGrid, model: VolterraModel, init, law: LawFlow,
                         delta: float, estimator: str, seed: int):
    """One replication: pathwise error, particle-vs-reference and reference-vs-reference curves."""
    noise = NoisePlan(seed)
    ps = simulate_particle_system(N, grid, model, init, noise)
    lim = simulate_frozen_law(grid, model, law, init, noise, N)
    diff = ps.states_tm - lim.states_tm
    path = np.mean(np.linalg.norm(diff, axis=2) ** delta, axis=1)
    rng = np.random.Generator(np.random.Philox(key=[seed, SUBSAMPLE]))
    pick = rng.permutation(law.N)[:2 * N]
    A, B = np.sort(pick[:N]), np.sort(pick[N:])
    n1 = grid.n_steps + 1
    w = np.empty(n1)
    comp = np.empty(n1)
    for k in range(n1):
        ref = law.clouds[k]
        w[k] = distance_power(estimator, delta, ps.states_tm[k], ref[A], seed=k)
        comp[k] = distance_power(estimator, delta, ref[A], ref[B], seed=k)
    return path, w, comp


def synchronous_coupling(N: int, grid: TimeGrid, model: VolterraModel, init, cfg: PicardConfig,
                         n_replications: int, master_seed: int, delta: Optional[float] = None,
                         *, picard: Optional[PicardResult] = None, estimator: Optional[str] = None,
                         threads: int = 1) -> CouplingResult:
    """Couple the particle system with limit copies sharing initial draws and increments."""
    delta = cfg.delta if delta is None else float(delta)
    if cfg.M_law < 4 * N:
        raise ReferenceTooSmall(f"M_law={cfg.M_law} < 4N={4 * N}")
    if n_replications < 1:
        raise ConfigError("n_replications must be >= 1")
    if picard is None:
        picard = picard_solve(grid, model, init, cfg, master_seed, threads=threads)
    estimator = estimator or choose_estimator(init.dim, N, cfg.estimator)
    seeds = [derive_seed(master_seed, COUPLING, N, r) for r in range(n_replications)]

    def rep(seed):
        return coupling_replication(N, grid, model, init, picard.law, delta, estimator, seed)

    parts = run_parallel(rep, seeds, threads)
    path = np.mean(np.stack([p[0] for p in parts]), axis=0)
    w = np.mean(np.stack([p[1] for p in parts]), axis=0)
    comp = np.mean(np.stack([p[2] for p in parts]), axis=0)
    meta = {"master_seed": master_seed, "replication_seeds": seeds, "estimator": estimator,
            "M_law": picard.law.N, "reference_resampling": "disjoint subsamples without replacement"}
    return CouplingResult(N, delta, grid.nodes.copy(), path, w, comp, w - comp, meta)
