import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from pydantic import ValidationError

from mfvolterra.errors import ConfigError, InsufficientPaths, NonFiniteState, NonPositiveEpsilon
from mfvolterra.grid import TimeGrid
from mfvolterra.harness import (ExperimentConfig, delta_from_epsilon, epsilon_n, expected_exponent,
                                fit_rate, glivenko_cantelli_benchmark, holder_regularity_diagnostic,
                                moment_diagnostic, rate_regime, resolve_threads, run_chaos_experiment)
from mfvolterra.measures import LawFlow
from mfvolterra.sde_engine import Dirac, Gaussian, NoisePlan, VolterraModel, simulate_frozen_law
from mfvolterra.coefficients import ConstantVol, LinearMeanField, Zero
from mfvolterra.kernels import Constant

from oracles import rl_increment_variance


def brownian(M, n=64, T=1.0, seed=0):
    g = TimeGrid(T, n)
    m = VolterraModel(K_mu=Constant(c=1), K_sigma=Constant(c=1), drift=Zero(), diffusion=ConstantVol(s=1))
    return simulate_frozen_law(g, m, LawFlow.constant(g, np.zeros((1, 1))), Dirac(x0=0.0), NoisePlan(seed), M,
                               keep_records=False)


class TestRates:
    def test_delta_examples(self):
        assert delta_from_epsilon(2) == 4.0
        assert delta_from_epsilon(4) == 3.0
        # (4 + 2e6) / 1e6 = 2 + 4e-6
        assert delta_from_epsilon(1e6) == pytest.approx(2.000004, rel=1e-12)

    @given(st.floats(1e-3, 1e6))
    def test_conjugate_identity(self, eps):
        assert 2 / (2 + eps) + 2 / delta_from_epsilon(eps) == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_nonpositive(self, eps):
        with pytest.raises(NonPositiveEpsilon):
            delta_from_epsilon(eps)

    def test_epsilon_n_examples(self):
        assert epsilon_n(1, 2, 100) == pytest.approx(0.1, rel=1e-15)
        assert epsilon_n(4, 2, 15) == pytest.approx(4 / math.sqrt(15), rel=1e-15)
        assert epsilon_n(4, 2, 15) == pytest.approx(1.032796, abs=1e-6)
        assert epsilon_n(6, 2, 8) == pytest.approx(0.5, rel=1e-15)

    @pytest.mark.parametrize("d", range(1, 9))
    @pytest.mark.parametrize("delta", [1, 2, 3, 4])
    def test_regime_by_sign(self, d, delta):
        sign = np.sign(d - 2 * delta)
        assert rate_regime(d, delta) == {-1: "sub_critical", 0: "critical", 1: "super_critical"}[sign]
        N = 37
        if sign < 0:
            assert epsilon_n(d, delta, N) == N ** -0.5
        elif sign == 0:
            assert epsilon_n(d, delta, N) == N ** -0.5 * math.log2(1 + N)
        else:
            assert epsilon_n(d, delta, N) == N ** (-delta / d)

    def test_expected_exponent(self):
        assert expected_exponent(5, 1) == -0.2
        assert expected_exponent(4, 2) == -0.5
        assert expected_exponent(1, 2) == -0.5


class TestFit:
    def test_exact_power(self):
        N = [10, 20, 40, 80]
        fit = fit_rate(N, [3.0 * n ** -0.5 for n in N])
        assert fit.slope == pytest.approx(-0.5, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0)

    def test_zero_values_undefined(self):
        fit = fit_rate([1, 2, 3, 4], [0.0, 0.0, 0.0, 0.0])
        assert not fit.defined and fit.to_dict()["slope"] is None

    @given(st.lists(st.floats(1e-6, 1e6), min_size=4, max_size=8))
    def test_r_squared_range(self, vals):
        fit = fit_rate(list(range(1, len(vals) + 1)), vals)
        assert 0.0 <= fit.r_squared <= 1.0


def experiment(tmp_path, **over):
    base = {
        "setting": "LipschitzMultiD",
        "model": {
            "K_mu": {"family": "fractional", "alpha": 0.25},
            "K_sigma": {"family": "fractional", "alpha": 0.25},
            "drift": {"family": "linear_mean_field", "a": -1.0, "b": 0.5, "c": 0.0},
            "diffusion": {"family": "affine_mean", "s0": 0.2, "s1": 0.1, "s2": 0.1},
        },
        "init": {"family": "gaussian", "mean": [0.0], "sd": [1.0]},
        "grid": {"T": 1.0, "n_steps": 8},
        "N_list": [4, 8, 16, 32],
        "n_replications": 2,
        "picard": {"M_law": 128},
        "epsilon": 2.0,
        "master_seed": 3,
        "output_dir": str(tmp_path),
    }
    base.update(over)
    return ExperimentConfig.model_validate(base)


class TestExperimentConfig:
    def test_short_n_list(self, tmp_path):
        with pytest.raises(ValidationError):
            experiment(tmp_path, N_list=[4, 8, 16])

    def test_unsorted_n_list(self, tmp_path):
        with pytest.raises(ValidationError):
            experiment(tmp_path, N_list=[4, 16, 8, 32])

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValidationError):
            experiment(tmp_path, typo=1)

    def test_schema_version(self, tmp_path):
        with pytest.raises(ValidationError):
            experiment(tmp_path, schema_version=2)

    def test_holder_setting_constraints(self, tmp_path):
        with pytest.raises(ValidationError):
            experiment(tmp_path, setting="HolderOneD")  # measure-dependent diffusion

    def test_delta(self, tmp_path):
        assert experiment(tmp_path).delta == 4.0
        assert experiment(tmp_path).picard_config.delta == 4.0


class TestChaosExperiment:
    def test_outputs(self, tmp_path):
        rep = run_chaos_experiment(experiment(tmp_path))
        assert rep.complete and rep.estimator == "sorted-1d"
        for name in ("report.json", "errors.csv", "rates.csv", "run.log"):
            assert (tmp_path / name).exists()
        header = (tmp_path / "errors.csv").read_text().splitlines()[0]
        assert header == "N,t,metric,value,estimator"
        assert (tmp_path / "rates.csv").read_text().splitlines()[0].startswith("N,epsilon_N,metric,debiased")
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["admissibility"]["p_threshold"] is None  # gamma bound is 0 for alpha=1/4, eps=2
        assert set(report["fits"]) == {"mean_pathwise_error", "wasserstein_error", "debiased"}
        for row in report["rows"]:
            assert row["mean_pathwise_error"] >= 0 and row["wasserstein_error"] >= 0

    def test_single_estimator_per_report(self, tmp_path):
        run_chaos_experiment(experiment(tmp_path))
        lines = (tmp_path / "errors.csv").read_text().splitlines()[1:]
        assert {ln.split(",")[-1] for ln in lines} == {"sorted-1d"}

    def test_measure_free_flags_undefined_slope(self, tmp_path):
        model = {
            "K_mu": {"family": "fractional", "alpha": 0.25},
            "K_sigma": {"family": "fractional", "alpha": 0.25},
            "drift": {"family": "linear_mean_field", "a": -1.0, "b": 0.0, "c": 0.0},
            "diffusion": {"family": "constant_vol", "s": 0.5},
        }
        rep = run_chaos_experiment(experiment(tmp_path, model=model))
        assert all(r["mean_pathwise_error"] == 0.0 for r in rep.rows)
        assert any("mean_pathwise_error" in f for f in rep.flags)

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_chaos_experiment(experiment(tmp_path), threads=1, out_dir=a)
        run_chaos_experiment(experiment(tmp_path), threads=3, out_dir=b)
        for name in ("errors.csv", "rates.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_reference_guard(self, tmp_path):
        cfg = experiment(tmp_path)
        bad = cfg.model_copy(update={"picard": cfg.picard.model_copy(update={"M_law": 100})})
        with pytest.raises(ConfigError):
            run_chaos_experiment(bad)

    def test_partial_report_on_failure(self, tmp_path, monkeypatch):
        import mfvolterra.harness as h
        real = h.synchronous_coupling

        def flaky(N, *a, **k):
            if N == 16:
                raise NonFiniteState(path=0, step=1)
            return real(N, *a, **k)

        monkeypatch.setattr(h, "synchronous_coupling", flaky)
        with pytest.raises(NonFiniteState):
            run_chaos_experiment(experiment(tmp_path))
        report = json.loads((tmp_path / "report.json").read_text())
        assert [r["N"] for r in report["rows"]] == [4, 8]
        assert not report["complete"] and report["failure"].startswith("N=16")
        assert len((tmp_path / "rates.csv").read_text().splitlines()) == 3


class TestGlivenkoCantelli:
    def test_dirac_zero(self):
        tab = glivenko_cantelli_benchmark(1, 2.0, [8, 16, 32, 64], Dirac(x0=0.0), 4, 0)
        assert all(m == 0.0 for m in tab.mean)
        assert not tab.fit.defined

    def test_one_dimensional_rate(self):
        tab = glivenko_cantelli_benchmark(1, 1.0, [32, 128, 512, 2048], Gaussian(mean=0, sd=1), 100, 1)
        assert tab.regime == "sub_critical" and tab.estimator == "sorted-1d"
        assert abs(tab.fit.slope + 0.5) < 0.15

    def test_critical_divides_log(self):
        tab = glivenko_cantelli_benchmark(4, 2.0, [8, 16, 32, 64], Gaussian(mean=[0] * 4, sd=1), 3, 0)
        assert tab.log_divided and tab.regime == "critical" and tab.estimator == "exact"

    def test_deterministic_across_threads(self):
        args = (2, 1.0, [8, 16, 32, 64], Gaussian(mean=[0, 0], sd=1), 3, 5)
        assert glivenko_cantelli_benchmark(*args).mean == glivenko_cantelli_benchmark(*args, threads=4).mean

    def test_dimension_checked(self):
        with pytest.raises(ConfigError):
            glivenko_cantelli_benchmark(2, 1.0, [8, 16], Dirac(x0=0.0), 2, 0)


class TestDiagnostics:
    def test_insufficient_paths(self):
        with pytest.raises(InsufficientPaths):
            holder_regularity_diagnostic(brownian(999, n=8))

    def test_brownian_beta(self):
        assert holder_regularity_diagnostic(brownian(4000, n=128)) == pytest.approx(0.5, abs=0.05)

    def test_ode_beta(self):
        g = TimeGrid(1.0, 128)
        m = VolterraModel(K_mu=Constant(c=1), K_sigma=Constant(c=1), drift=LinearMeanField(a=0, b=0, c=1.0),
                          diffusion=ConstantVol(s=0))
        ens = simulate_frozen_law(g, m, LawFlow.constant(g, np.zeros((1, 1))), Dirac(x0=0.0), NoisePlan(0), 1000)
        assert holder_regularity_diagnostic(ens) == pytest.approx(1.0, abs=0.05)

    def test_fractional_oracle_slope(self):
        # oracle: log-log slope of the quadrature increment variance, averaged over anchors
        alpha = 0.25
        hs = np.array([2.0 ** -k for k in range(7, 1, -1)])
        v = [np.mean([rl_increment_variance(alpha, t, h) for t in np.linspace(0.0, 1.0 - h, 9)]) for h in hs]
        slope = np.polyfit(np.log(hs), np.log(v), 1)[0] / 2
        assert slope == pytest.approx(0.5 - alpha, abs=0.07)

    def test_moments_zero(self):
        g = TimeGrid(1.0, 8)
        m = VolterraModel(K_mu=Constant(c=1), K_sigma=Constant(c=1), drift=Zero(), diffusion=ConstantVol(s=0))
        ens = simulate_frozen_law(g, m, LawFlow.constant(g, np.zeros((1, 1))), Dirac(x0=0.0), NoisePlan(0), 10)
        tab = moment_diagnostic(ens, [1, 2, 4])
        assert tab.sup_moment == [0.0, 0.0, 0.0] and not tab.any_blowup

    def test_brownian_moments(self):
        M = 20_000
        tab = moment_diagnostic(brownian(M, n=16), [2, 4])
        # standard errors of the terminal second and fourth moments: sqrt(2/M) and sqrt(96/M)
        assert tab.sup_moment[0] == pytest.approx(1.0, abs=4 * math.sqrt(2 / M))
        assert tab.sup_moment[1] == pytest.approx(3.0, abs=4 * math.sqrt(96 / M))
        assert tab.argmax_t[0] > 0.5

    def test_blowup_flag(self):
        g = TimeGrid(1.0, 64)
        m = VolterraModel(K_mu=Constant(c=1), K_sigma=Constant(c=1), drift=LinearMeanField(a=8.0),
                          diffusion=ConstantVol(s=0))
        ens = simulate_frozen_law(g, m, LawFlow.constant(g, np.zeros((1, 1))), Dirac(x0=1.0), NoisePlan(0), 2)
        assert moment_diagnostic(ens, [2]).any_blowup


class TestThreads:
    def test_env_wins(self, monkeypatch):
        monkeypatch.setenv("VC_THREADS", "5")
        assert resolve_threads(2) == 5

    def test_default(self, monkeypatch):
        monkeypatch.delenv("VC_THREADS", raising=False)
        assert resolve_threads(None) == 1 and resolve_threads(3) == 3

    def test_bad(self, monkeypatch):
        monkeypatch.setenv("VC_THREADS", "x")
        with pytest.raises(ConfigError):
            resolve_threads(None)
