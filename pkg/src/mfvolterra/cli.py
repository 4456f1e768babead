"""Command-line entry point ``mfvolterra``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, NumericalError
from .harness import (ExperimentConfig, GridConfig, delta_from_epsilon, epsilon_n,
                      glivenko_cantelli_benchmark, moment_diagnostic, rate_regime,
                      resolve_threads, run_chaos_experiment)
from .kernels import KernelSpec, verify_assumption_singular, verify_assumption_smooth
from .mckean import picard_solve, simulate_particle_system
from .measures import LawFlow, write_law_csv
from .sde_engine import InitSampler, NoisePlan, VolterraModel, simulate_frozen_law
from .yamada_watanabe import YWSequence, dump_table


class _Cfg(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    schema_version: Literal[1] = 1


class SimulateConfig(_Cfg):
    model: VolterraModel
    init: InitSampler
    grid: GridConfig = GridConfig()
    M: int = Field(1000, ge=1)
    system: Literal["independent", "particle"] = "independent"
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    fast_path: bool = False


class GCConfig(_Cfg):
    d: int = Field(ge=1)
    delta: float = Field(ge=1.0)
    N_list: list[int]
    sampler: InitSampler
    n_reps: int = Field(20, ge=1)
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    estimator: str = "auto"
    max_exact: Optional[int] = None


class KernelCheckConfig(_Cfg):
    kernel: KernelSpec
    T: float = Field(1.0, gt=0.0)
    assumption: Literal["singular", "smooth", "convolutional"] = "singular"
    gamma: Optional[float] = None
    epsilon: Optional[float] = None
    n_pairs: int = Field(64, ge=1)
    master_seed: int = 0


def _load(cls, path):
    if path is None:
        raise ConfigError("--config is required for this subcommand")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return cls.model_validate_json(text)


def _seeded(cfg, seed):
    return cfg if seed is None else cfg.model_copy(update={"master_seed": seed})


def _out(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    cfg = _seeded(_load(SimulateConfig, args.config), args.seed)
    grid = cfg.grid.build()
    noise = NoisePlan(cfg.master_seed)
    if cfg.system == "particle":
        ens = simulate_particle_system(cfg.M, grid, cfg.model, cfg.init, noise, fast_path=cfg.fast_path)
    else:
        if cfg.model.uses_measure:
            raise ConfigError("independent paths need measure-free coefficients; use system='particle'")
        dummy = LawFlow.constant(grid, np.zeros((1, cfg.init.dim)))
        ens = simulate_frozen_law(grid, cfg.model, dummy, cfg.init, noise, cfg.M,
                                  threads=args.threads, fast_path=cfg.fast_path, keep_records=False)
    out = _out(args)
    ens.to_csv(out / "paths.csv")
    mom = moment_diagnostic(ens, [1.0, 2.0, 4.0])
    _dump({"metadata": ens.metadata, "moments": mom.__dict__}, out / "summary.json")
    return 0


def cmd_picard(args) -> int:
    cfg = _seeded(_load(ExperimentConfig, args.config), args.seed)
    res = picard_solve(cfg.grid.build(), cfg.model, cfg.init, cfg.picard_config, cfg.master_seed,
                       threads=args.threads)
    out = _out(args)
    _dump(res.to_dict(), out / "picard.json")
    write_law_csv(res.law, out / "law.csv")
    with open(out / "means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"mean_x{i}" for i in range(res.law.d)])
        for t, m in zip(res.law.grid.nodes, res.law.means):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in m])
    return 0


def cmd_chaos(args) -> int:
    cfg = _seeded(_load(ExperimentConfig, args.config), args.seed)
    run_chaos_experiment(cfg, threads=args.threads, out_dir=args.out or cfg.output_dir)
    return 0


def cmd_gc(args) -> int:
    cfg = _seeded(_load(GCConfig, args.config), args.seed)
    tab = glivenko_cantelli_benchmark(cfg.d, cfg.delta, cfg.N_list, cfg.sampler, cfg.n_reps,
                                      cfg.master_seed, estimator=cfg.estimator,
                                      max_exact=cfg.max_exact, threads=args.threads)
    out = _out(args)
    with open(out / "gc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "mean", "stderr", "estimator"])
        for r in tab.to_rows():
            w.writerow([r["N"], repr(r["mean"]), repr(r["stderr"]), r["estimator"]])
    _dump({"fit": tab.fit.to_dict(), "expected_slope": tab.expected_slope, "regime": tab.regime,
           "log_divided": tab.log_divided, "estimator": tab.estimator}, out / "gc.json")
    return 0


def cmd_verify_kernel(args) -> int:
    cfg = _load(KernelCheckConfig, args.config)
    K = cfg.kernel.with_horizon(cfg.T)
    if cfg.assumption == "singular":
        if cfg.gamma is None or cfg.epsilon is None:
            raise ConfigError("singular check needs gamma and epsilon")
        rep = verify_assumption_singular(K, cfg.gamma, cfg.epsilon, cfg.n_pairs,
                                         args.seed if args.seed is not None else cfg.master_seed)
    else:
        rep = verify_assumption_smooth(K, cfg.assumption)
    _dump(rep.to_dict(), _out(args) / "kernel_check.json")
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def cmd_rates(args) -> int:
    if args.epsilon is not None:
        delta = delta_from_epsilon(args.epsilon)
    elif args.delta is not None:
        delta = args.delta
    else:
        raise ConfigError("give --delta or --epsilon")
    if args.d < 1 or delta < 1 or any(n < 1 for n in args.N):
        raise ConfigError("need d >= 1, delta >= 1 and N >= 1")
    w = csv.writer(sys.stdout)
    w.writerow(["d", "delta", "N", "epsilon_N", "regime"])
    for N in args.N:
        w.writerow([args.d, repr(delta), N, repr(epsilon_n(args.d, delta, N)), rate_regime(args.d, delta)])
    return 0


def cmd_yw_dump(args) -> int:
    seq = YWSequence(args.xi, args.n)
    x = np.linspace(-args.xmax, args.xmax, args.points)
    tab = dump_table(seq, args.n, x)
    out = _out(args)
    with open(out / f"yw_n{args.n}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "phi", "dphi", "d2phi"])
        for row in tab:
            w.writerow([repr(float(v)) for v in row])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (VC_THREADS wins)")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="mfvolterra",
                                description="Mean-field stochastic Volterra simulation and chaos experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate paths").set_defaults(fn=cmd_simulate)
    sub.add_parser("picard", parents=[common], help="solve the law flow by Picard iteration").set_defaults(fn=cmd_picard)
    sub.add_parser("chaos", parents=[common], help="propagation-of-chaos experiment").set_defaults(fn=cmd_chaos)
    sub.add_parser("gc-bench", parents=[common], help="empirical-measure convergence benchmark").set_defaults(fn=cmd_gc)
    sub.add_parser("verify-kernel", parents=[common], help="check kernel assumptions").set_defaults(fn=cmd_verify_kernel)
    r = sub.add_parser("rates", parents=[common], help="print reference rates")
    r.add_argument("--d", type=int, required=True)
    r.add_argument("--delta", type=float)
    r.add_argument("--epsilon", type=float)
    r.add_argument("--N", type=int, nargs="+", required=True)
    r.set_defaults(fn=cmd_rates)
    y = sub.add_parser("yw-dump", parents=[common], help="tabulate phi_n and derivatives")
    y.add_argument("--xi", type=float, default=0.0)
    y.add_argument("--n", type=int, default=1)
    y.add_argument("--xmax", type=float, default=3.0)
    y.add_argument("--points", type=int, default=601)
    y.set_defaults(fn=cmd_yw_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.threads = resolve_threads(args.threads)
        return args.fn(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
