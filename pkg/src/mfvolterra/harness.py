"""Propagation-of-chaos experiments: reference rates, rate fitting, the
empirical-measure benchmark, path diagnostics and report emission.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError, InsufficientPaths, NonPositiveEpsilon, ReferenceTooSmall
from .grid import TimeGrid
from .kernels import fractional_gamma_bound, Fractional, verify_assumption_singular
from .mckean import PicardConfig, derive_seed, picard_solve, synchronous_coupling
from .measures import choose_estimator, distance_power
from .sde_engine import InitSampler, PathEnsemble, VolterraModel, run_parallel

SCHEMA_VERSION = 1
GC_DOMAIN = 4
log = logging.getLogger("mfvolterra")


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------
def delta_from_epsilon(epsilon: float) -> float:
    """Wasserstein order ``(4 + 2 eps) / eps`` paired with the kernel exponent ``eps``."""
    if not epsilon > 0:
        raise NonPositiveEpsilon(f"epsilon must be > 0, got {epsilon}")
    return (4.0 + 2.0 * epsilon) / epsilon


def rate_regime(d: int, delta: float) -> str:
    if d < 2 * delta:
        return "sub_critical"
    if d == 2 * delta:
        return "critical"
    return "super_critical"


def epsilon_n(d: int, delta: float, N: int) -> float:
    """Reference rate of ``E[W_delta^delta]`` for an ``N``-sample empirical measure."""
    regime = rate_regime(d, delta)
    if regime == "sub_critical":
        return N ** -0.5
    if regime == "critical":
        return N ** -0.5 * math.log2(1 + N)
    return N ** (-delta / d)


def expected_exponent(d: int, delta: float) -> float:
    """Power-law exponent of ``epsilon_n`` once any log factor is divided out."""
    return -delta / d if d > 2 * delta else -0.5


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float

    @property
    def defined(self) -> bool:
        return math.isfinite(self.slope)

    def to_dict(self) -> dict:
        return {k: (v if math.isfinite(v) else None) for k, v in asdict(self).items()}


def fit_rate(N: Sequence[float], values: Sequence[float]) -> RateFit:
    """Least squares of ``log(value)`` on ``log(N)``; NaN slope if any value is not positive."""
    x = np.log(np.asarray(N, dtype=float))
    y = np.asarray(values, dtype=float)
    if len(x) < 2 or not (np.isfinite(y).all() and (y > 0).all()):
        return RateFit(math.nan, math.nan, math.nan)
    y = np.log(y)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
class GridConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    T: float = Field(1.0, gt=0.0)
    n_steps: int = Field(256, ge=1)

    def build(self) -> TimeGrid:
        return TimeGrid(self.T, self.n_steps)


class ExperimentConfig(BaseModel):
    """JSON-readable experiment description; unknown keys are rejected."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    setting: Literal["LipschitzMultiD", "HolderOneD"]
    model: VolterraModel
    init: InitSampler
    grid: GridConfig = GridConfig()
    N_list: list[int]
    n_replications: int = Field(8, ge=1)
    picard: PicardConfig = PicardConfig()
    epsilon: Optional[float] = None
    gamma: Optional[float] = None
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    output_dir: str = "out"
    estimator: str = "auto"

    @field_validator("N_list")
    @classmethod
    def _n_list(cls, v):
        if len(v) < 4:
            raise ValueError("N_list needs at least 4 entries for rate fitting")
        if any(b <= a for a, b in zip(v, v[1:])) or v[0] < 1:
            raise ValueError("N_list must be positive and strictly increasing")
        return v

    @model_validator(mode="after")
    def _setting(self):
        if self.setting == "HolderOneD":
            if self.init.dim != 1:
                raise ValueError("HolderOneD needs d = 1")
            if self.model.diffusion.requires_measure:
                raise ValueError("HolderOneD needs a measure-free diffusion")
        else:
            if self.model.diffusion.holder_exponent != 1.0:
                raise ValueError("LipschitzMultiD needs a Lipschitz diffusion")
            if self.epsilon is not None and not self.epsilon > 0:
                raise ValueError("epsilon must be > 0")
        return self

    @property
    def delta(self) -> float:
        if self.setting == "HolderOneD":
            return 1.0
        if self.epsilon is not None:
            return delta_from_epsilon(self.epsilon)
        return self.picard.delta

    @property
    def picard_config(self) -> PicardConfig:
        return self.picard.model_copy(update={"delta": self.delta})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.model_validate_json(Path(path).read_text())


def admissibility_notes(cfg: ExperimentConfig) -> dict:
    """Kernel-assumption checks recorded (not enforced) for the Lipschitz setting."""
    if cfg.setting != "LipschitzMultiD" or cfg.epsilon is None:
        return {}
    eps = cfg.epsilon
    notes = {"epsilon": eps, "delta": cfg.delta}
    gamma = cfg.gamma
    if gamma is None:
        bounds = [fractional_gamma_bound(K.alpha, eps) for K in (cfg.model.K_mu, cfg.model.K_sigma)
                  if isinstance(K, Fractional)]
        gamma = min(bounds) if bounds else 1.0 / (2.0 + eps)
    notes["gamma"] = gamma
    if gamma > 0:
        notes["p_threshold"] = max(1.0 / gamma, 1.0 + 2.0 / eps)
        reports = []
        for name, K in (("K_mu", cfg.model.K_mu), ("K_sigma", cfg.model.K_sigma)):
            rep = verify_assumption_singular(K.with_horizon(cfg.grid.T), gamma, eps)
            reports.append({"kernel": name, **rep.to_dict()})
        notes["kernel_checks"] = reports
        notes["admissible"] = all(r["satisfied"] for r in reports)
    else:
        notes["p_threshold"] = None
        notes["admissible"] = False
        notes["reason"] = "no gamma > 0 is compatible with the kernel exponents and epsilon"
    return notes


# ---------------------------------------------------------------------------
# chaos experiment
# ---------------------------------------------------------------------------
METRICS = ("mean_pathwise_error", "wasserstein_error", "debiased")


def provenance(threads: int) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "threads": threads,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


@dataclass
class ChaosReport:
    config: dict
    delta: float
    estimator: str
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    picard: dict = field(default_factory=dict)
    admissibility: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    complete: bool = False
    failure: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out: Path) -> None:
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _fmt(v: float) -> str:
    return repr(float(v))


def run_chaos_experiment(cfg: ExperimentConfig, threads: int = 1, out_dir=None) -> ChaosReport:
    """Run the coupling experiment for each ``N`` and fit rates to the sup-in-time errors."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        return _run(cfg, threads, out)
    finally:
        log.removeHandler(handler)
        handler.close()


def _run(cfg: ExperimentConfig, threads: int, out: Path) -> ChaosReport:
    grid = cfg.grid.build()
    pcfg = cfg.picard_config
    delta = cfg.delta
    d = cfg.init.dim
    if pcfg.M_law < 4 * cfg.N_list[-1]:
        raise ReferenceTooSmall(f"M_law={pcfg.M_law} < 4 * max(N_list)={4 * cfg.N_list[-1]}")
    policy = "sorted-1d" if cfg.setting == "HolderOneD" else cfg.estimator
    estimator = choose_estimator(d, cfg.N_list[-1], policy)
    report = ChaosReport(config=json.loads(cfg.model_dump_json()), delta=delta, estimator=estimator,
                         provenance=provenance(threads))
    report.admissibility = admissibility_notes(cfg)
    if report.admissibility and not report.admissibility.get("admissible", True):
        log.warning("kernel assumptions not verified for this (gamma, epsilon): %s",
                    report.admissibility.get("reason", "see kernel_checks"))

    log.info("picard: M_law=%d delta=%g", pcfg.M_law, delta)
    picard = picard_solve(grid, cfg.model, cfg.init, pcfg, cfg.master_seed, threads=threads)
    report.picard = picard.to_dict()
    report.picard["bias_scale"] = epsilon_n(d, delta, pcfg.M_law)
    log.info("picard converged in %d iterations, gaps %s", picard.iterations_used, picard.gap_history)

    with open(out / "errors.csv", "w", newline="") as fe, open(out / "rates.csv", "w", newline="") as fr:
        we, wr = csv.writer(fe), csv.writer(fr)
        we.writerow(["N", "t", "metric", "value", "estimator"])
        wr.writerow(["N", "epsilon_N", "metric", "debiased", "pathwise"])
        for N in cfg.N_list:
            try:
                res = synchronous_coupling(N, grid, cfg.model, cfg.init, pcfg, cfg.n_replications,
                                           cfg.master_seed, delta, picard=picard,
                                           estimator=estimator, threads=threads)
            except Exception as exc:
                report.failure = f"N={N}: {type(exc).__name__}: {exc}"
                log.error(report.failure)
                report.write(out)
                raise
            for t, metric, value in res.rows():
                we.writerow([N, _fmt(t), metric, _fmt(value), estimator])
            row = {
                "N": N,
                "epsilon_N": epsilon_n(d, delta, N),
                "mean_pathwise_error": float(res.mean_pathwise_error.max()),
                "wasserstein_error": float(res.wasserstein_error.max()),
                "reference_companion": float(res.reference_companion.max()),
                "debiased": float(res.debiased.max()),
            }
            report.rows.append(row)
            wr.writerow([N, _fmt(row["epsilon_N"]), _fmt(row["wasserstein_error"]),
                         _fmt(row["debiased"]), _fmt(row["mean_pathwise_error"])])
            fe.flush()
            fr.flush()
            report.write(out)
            log.info("N=%d done: %s", N, row)

    Ns = [r["N"] for r in report.rows]
    for metric in METRICS:
        fit = fit_rate(Ns, [r[metric] for r in report.rows])
        report.fits[metric] = fit.to_dict()
        if not fit.defined:
            report.flags.append(f"slope undefined for {metric} (non-positive or zero values)")
    report.complete = True
    report.write(out)
    return report


# ---------------------------------------------------------------------------
# empirical-measure benchmark
# ---------------------------------------------------------------------------
@dataclass
class GCTable:
    d: int
    delta: float
    estimator: str
    N: list
    mean: list
    stderr: list
    fit: RateFit
    expected_slope: float
    regime: str
    log_divided: bool

    def to_rows(self):
        return [{"N": n, "mean": m, "stderr": s, "estimator": self.estimator}
                for n, m, s in zip(self.N, self.mean, self.stderr)]


def glivenko_cantelli_benchmark(d: int, delta: float, N_list: Sequence[int], sampler, n_reps: int,
                                seed: int, *, ref_factor: int = 16, estimator: str = "auto",
                                max_exact: Optional[int] = None, threads: int = 1) -> GCTable:
    """Estimate ``E[W_delta(rho_N, rho)^delta]`` against an independent reference cloud.

    The reference has ``ref_factor * N`` points and is resampled with
    replacement down to ``N`` so the exact equal-size distance applies.  In the
    critical regime values are divided by ``log2(1 + N)`` before fitting.
    """
    if sampler.dim != d:
        raise ConfigError(f"sampler has d={sampler.dim}, expected {d}")
    if ref_factor < 16:
        raise ConfigError("reference cloud must be at least 16N")
    max_n = max(N_list)
    if estimator == "auto" and d > 1 and max_exact is not None and max_n <= max_exact:
        est = "exact"
    else:
        est = choose_estimator(d, max_n, estimator)
    limit = max_exact or max_n

    def one(task):
        N, r = task
        rng = np.random.Generator(np.random.Philox(key=[derive_seed(seed, GC_DOMAIN, N), r]))
        cloud = sampler.draw(rng, N)
        ref = sampler.draw(rng, ref_factor * N)
        ref = ref[rng.integers(0, ref.shape[0], N)]
        return distance_power(est, delta, cloud, ref, seed=r, max_n=limit)

    tasks = [(N, r) for N in N_list for r in range(n_reps)]
    vals = np.array(run_parallel(one, tasks, threads)).reshape(len(N_list), n_reps)
    means = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / math.sqrt(n_reps) if n_reps > 1 else np.full(len(N_list), np.nan)
    regime = rate_regime(d, delta)
    critical = regime == "critical"
    target = means / np.log2(1 + np.asarray(N_list)) if critical else means
    return GCTable(d, delta, est, list(N_list), means.tolist(), se.tolist(),
                   fit_rate(N_list, target), expected_exponent(d, delta), regime, critical)


# ---------------------------------------------------------------------------
# path diagnostics
# ---------------------------------------------------------------------------
def holder_regularity_diagnostic(ensemble: PathEnsemble, q: float = 2.0,
                                 lag_list: Optional[Sequence[int]] = None) -> float:
    """Estimate ``beta`` from ``E|X_{t+h} - X_t|^q ~ h^(beta q)``.

    Lags are in grid steps; moments are averaged over paths and anchor nodes.
    """
    if ensemble.M < 1000:
        raise InsufficientPaths(f"need at least 1000 paths, got {ensemble.M}")
    n = ensemble.grid.n_steps
    if lag_list is None:
        lag_list = [2 ** i for i in range(int(math.log2(max(n // 4, 1))) + 1)]
    if any(h < 1 or h > n for h in lag_list) or len(lag_list) < 2:
        raise ConfigError("lags must lie in 1..n_steps and there must be at least two")
    X = ensemble.states_tm
    mom = []
    for h in lag_list:
        inc = np.linalg.norm(X[h:] - X[:-h], axis=2)
        mom.append(float(np.mean(inc ** q)))
    fit = fit_rate(np.asarray(lag_list) * ensemble.grid.dt, mom)
    return fit.slope / q


@dataclass
class MomentTable:
    q: list
    sup_moment: list
    argmax_t: list
    blowup: list

    @property
    def any_blowup(self) -> bool:
        return any(self.blowup)


def moment_diagnostic(ensemble: PathEnsemble, q_list: Sequence[float]) -> MomentTable:
    """Sup over nodes of the empirical ``q``-th moment, with a blow-up flag per ``q``.

    A blow-up is flagged when the largest per-node moment exceeds ten times the
    median per-node moment.
    """
    norms = np.linalg.norm(ensemble.states_tm, axis=2)
    t = ensemble.grid.nodes
    sup, arg, flag = [], [], []
    for q in q_list:
        per_node = np.mean(norms ** q, axis=1)
        k = int(np.argmax(per_node))
        med = float(np.median(per_node))
        sup.append(float(per_node[k]))
        arg.append(float(t[k]))
        flag.append(bool(med > 0 and per_node[k] > 10.0 * med))
    return MomentTable(list(q_list), sup, arg, flag)


def resolve_threads(cli_threads: Optional[int]) -> int:
    env = os.environ.get("VC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"VC_THREADS must be an integer, got {env!r}")
    else:
        n = cli_threads or 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n
