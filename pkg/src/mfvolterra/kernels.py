"""Volterra kernels ``K(s, t)`` on ``{0 <= s <= t <= T}``.

Kernels are immutable pydantic models discriminated by ``family`` so they can
be read straight from experiment config files, e.g.
``{"family": "fractional", "alpha": 0.25}``.

Discretisation weights are built here as well: for a uniform grid the
drift weight ``w[k, j]`` approximates ``int_{t_j}^{t_{j+1}} K(s, t_k) ds`` and
the diffusion weight multiplies the Brownian increment over ``[t_j, t_{j+1}]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Annotated, ClassVar, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from .errors import (
    ConfigError,
    OutOfDomain,
    QuadratureFailure,
    SingularAtDiagonal,
    SingularKernelRejected,
    VarianceMatchedUndefined,
)
from .grid import TimeGrid

QUAD_RTOL = 1e-8

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


class WeightMode(str, Enum):
    LEFT_POINT = "left_point"
    VARIANCE_MATCHED = "variance_matched"


class _Kernel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    horizon: Optional[float] = Field(default=None, gt=0)

    is_singular: ClassVar[bool] = False
    is_convolutional: ClassVar[bool] = False

    # -- to be provided by families -------------------------------------
    def _values(self, s, t):
        raise NotImplementedError

    def _integral(self, a, b, t):
        """``int_a^b K(s, t) ds`` (vectorised); ``None`` means no closed form."""
        return None

    def _integral_sq(self, a, b, t):
        """``int_a^b K(s, t)**2 ds``; ``None`` means no closed form."""
        return None

    # -------------------------------------------------------------------
    def with_horizon(self, T: float):
        return self.model_copy(update={"horizon": float(T)})

    def values(self, s, t):
        """Unchecked vectorised evaluation (callers guarantee ``s < t`` where needed)."""
        return self._values(np.asarray(s, dtype=float), np.asarray(t, dtype=float))

    def tilde(self, u):
        """Convolution profile ``K~(u)`` with ``K(s, t) = K~(t - s)``."""
        if not self.is_convolutional:
            raise ConfigError(f"{self.family} kernel is not convolutional")
        u = np.asarray(u, dtype=float)
        return self._values(np.zeros_like(u), u)

    def label(self) -> str:
        params = self.model_dump(exclude={"horizon", "family"})
        inner = ", ".join(f"{k}={v}" for k, v in params.items()
                          if not isinstance(v, (list, tuple)))
        return f"{self.family}({inner})"


class Fractional(_Kernel):
    family: Literal["fractional"] = "fractional"
    alpha: float = Field(gt=0.0, lt=0.5)
    is_singular: ClassVar[bool] = True
    is_convolutional: ClassVar[bool] = True

    def _values(self, s, t):
        with np.errstate(divide="ignore"):
            return (t - s) ** (-self.alpha)

    def _integral(self, a, b, t):
        e = 1.0 - self.alpha
        return ((t - a) ** e - (t - b) ** e) / e

    def _integral_sq(self, a, b, t):
        e = 1.0 - 2.0 * self.alpha
        if e <= 0:
            raise VarianceMatchedUndefined(
                f"int K^2 diverges for alpha={self.alpha} (needs 2*alpha < 1)")
        return ((t - a) ** e - (t - b) ** e) / e


class ExpConvolution(_Kernel):
    family: Literal["exp_convolution"] = "exp_convolution"
    c: float = 1.0
    lam: float = Field(default=1.0, ge=0.0)
    is_convolutional: ClassVar[bool] = True

    def _values(self, s, t):
        return self.c * np.exp(-self.lam * (t - s))

    def _integral(self, a, b, t):
        if self.lam == 0.0:
            return self.c * (b - a)
        lam = self.lam
        return self.c * (np.exp(-lam * (t - b)) - np.exp(-lam * (t - a))) / lam

    def _integral_sq(self, a, b, t):
        if self.lam == 0.0:
            return self.c ** 2 * (b - a)
        lam2 = 2.0 * self.lam
        return self.c ** 2 * (np.exp(-lam2 * (t - b)) - np.exp(-lam2 * (t - a))) / lam2


class Constant(_Kernel):
    family: Literal["constant"] = "constant"
    c: float = 1.0
    is_convolutional: ClassVar[bool] = True

    def _values(self, s, t):
        return np.full(np.broadcast(s, t).shape, self.c, dtype=float)

    def _integral(self, a, b, t):
        return self.c * (np.asarray(b) - np.asarray(a)) + 0.0 * np.asarray(t)

    def _integral_sq(self, a, b, t):
        return self.c ** 2 * (np.asarray(b) - np.asarray(a)) + 0.0 * np.asarray(t)


class SmoothConvolution(_Kernel):
    """Tabulated ``K~`` (and optionally ``K~'``) with monotone cubic interpolation."""

    family: Literal["smooth_convolution"] = "smooth_convolution"
    nodes: tuple[float, ...]
    values_table: tuple[float, ...]
    derivatives_table: Optional[tuple[float, ...]] = None
    is_convolutional: ClassVar[bool] = True

    @model_validator(mode="after")
    def _check_table(self):
        n = len(self.nodes)
        if n < 2 or len(self.values_table) != n:
            raise ValueError("nodes and values_table must have equal length >= 2")
        if self.derivatives_table is not None and len(self.derivatives_table) != n:
            raise ValueError("derivatives_table length must match nodes")
        if self.nodes[0] != 0.0 or any(b <= a for a, b in zip(self.nodes, self.nodes[1:])):
            raise ValueError("nodes must start at 0 and be strictly increasing")
        return self

    @property
    def _interp(self):
        return _pchip(self.nodes, self.values_table)

    def _values(self, s, t):
        return self._interp(t - s)

    def _integral(self, a, b, t):
        # exact integral of the piecewise-cubic interpolant
        F = _pchip_antiderivative(self.nodes, self.values_table)
        return F(t - a) - F(t - b)


@lru_cache(maxsize=64)
def _pchip(nodes, values):
    return PchipInterpolator(np.asarray(nodes), np.asarray(values), extrapolate=True)


@lru_cache(maxsize=64)
def _pchip_antiderivative(nodes, values):
    return _pchip(nodes, values).antiderivative()


KernelSpec = Annotated[
    Union[Fractional, ExpConvolution, Constant, SmoothConvolution],
    Field(discriminator="family"),
]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def eval_kernel(spec: _Kernel, s: float, t: float) -> float:
    """Return ``K(s, t)`` after checking ``(s, t)`` lies in the simplex."""
    if not (0.0 <= s <= t) or (spec.horizon is not None and t > spec.horizon):
        raise OutOfDomain(f"(s, t) = ({s}, {t}) is outside the simplex")
    if spec.is_singular and s == t:
        raise SingularAtDiagonal(f"{spec.family} kernel is singular at s = t = {t}")
    return float(spec.values(s, t))


def _gauss_legendre(f, a, b):
    """3-point Gauss-Legendre on each ``[a_i, b_i]`` (vectorised over intervals)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    total = np.zeros(np.broadcast(a, b).shape)
    for x, w in zip(_GL_NODES, _GL_WEIGHTS):
        total = total + w * f(mid + half * x)
    return half * total


def _check_step(grid: TimeGrid, k: int):
    if not 1 <= k <= grid.n_steps:
        raise ConfigError(f"step index k={k} outside 1..{grid.n_steps}")


def drift_weights(spec: _Kernel, grid: TimeGrid, k: int) -> np.ndarray:
    """Weights ``w_j ~ int_{t_j}^{t_{j+1}} K(s, t_k) ds`` for ``j = 0..k-1``."""
    _check_step(grid, k)
    t = grid.nodes
    a, b, tk = t[:k], t[1:k + 1], t[k]
    exact = spec._integral(a, b, tk)
    if exact is not None:
        return np.asarray(exact, dtype=float)
    return _gauss_legendre(lambda s: spec.values(s, tk), a, b)


def diffusion_weights(spec: _Kernel, grid: TimeGrid, k: int,
                      mode: WeightMode | str | None = None) -> np.ndarray:
    """Weights multiplying ``sigma(t_j, X_j) dB_j`` in the value at ``t_k``.

    ``left_point`` uses ``K(t_j, t_k)``; ``variance_matched`` uses the root mean
    square of ``K(., t_k)`` over ``[t_j, t_{j+1}]`` so that the Ito isometry is
    reproduced exactly for deterministic integrands.
    """
    _check_step(grid, k)
    mode = default_mode(spec) if mode is None else WeightMode(mode)
    t = grid.nodes
    a, b, tk = t[:k], t[1:k + 1], t[k]
    if mode is WeightMode.LEFT_POINT:
        return np.asarray(spec.values(a, tk), dtype=float)
    sq = spec._integral_sq(a, b, tk)
    if sq is None:
        sq = _gauss_legendre(lambda s: spec.values(s, tk) ** 2, a, b)
    sign = np.sign(spec.values(0.5 * (a + b), tk))
    sign = np.where(sign == 0, 1.0, sign)
    return sign * np.sqrt(np.maximum(sq, 0.0) / grid.dt)


def default_mode(spec: _Kernel) -> WeightMode:
    return WeightMode.VARIANCE_MATCHED if spec.is_singular else WeightMode.LEFT_POINT


def weight_matrix(spec: _Kernel, grid: TimeGrid, kind: str,
                  mode: WeightMode | str | None = None) -> np.ndarray:
    """Lower-triangular ``(n+1, n)`` matrix; row ``k`` holds the weights for ``t_k``."""
    n = grid.n_steps
    W = np.zeros((n + 1, n))
    for k in range(1, n + 1):
        if kind == "drift":
            W[k, :k] = drift_weights(spec, grid, k)
        elif kind == "diffusion":
            W[k, :k] = diffusion_weights(spec, grid, k, mode)
        else:
            raise ValueError(kind)
    return W


def geometric_ratio(spec: _Kernel, grid: TimeGrid) -> Optional[float]:
    """Ratio ``r`` with ``w[k+1, j] = r * w[k, j]`` if the kernel has one.

    Holds for exponential (``r = exp(-lam*dt)``) and constant (``r = 1``)
    kernels and enables the running-sum fast path in the engine.
    """
    if isinstance(spec, ExpConvolution):
        return math.exp(-spec.lam * grid.dt)
    if isinstance(spec, Constant):
        return 1.0
    return None


# ---------------------------------------------------------------------------
# admissibility checks
# ---------------------------------------------------------------------------
class AssumptionId(str, Enum):
    SINGULAR = "A1"
    SMOOTH = "A4"
    CONVOLUTIONAL = "A5"


@dataclass
class KernelAssumptionReport:
    assumption_id: AssumptionId
    satisfied: bool
    estimated_L: float
    worst_pair: tuple[float, float]
    samples_checked: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "assumption_id": self.assumption_id.value,
            "satisfied": self.satisfied,
            "estimated_L": self.estimated_L,
            "worst_pair": list(self.worst_pair),
            "samples_checked": self.samples_checked,
            "verification": "sampled",
            **self.details,
        }


def _quad(f, a, b):
    if b <= a:
        return 0.0
    value, abserr, *_ = integrate.quad(f, a, b, epsabs=0.0, epsrel=QUAD_RTOL,
                                       limit=400, full_output=1)
    if not np.isfinite(value) or abserr > max(QUAD_RTOL * abs(value), 1e-300):
        raise QuadratureFailure(
            f"quad on [{a}, {b}] did not reach rtol {QUAD_RTOL}: "
            f"value={value!r}, abserr={abserr!r}")
    return value


def _fractional_history_integral(alpha: float, p: float, ratio: float) -> float:
    """``int_0^ratio |(v+1)^-alpha - v^-alpha|^p dv`` (the scaled history term)."""
    def f(v):
        return abs((v + 1.0) ** (-alpha) - v ** (-alpha)) ** p

    head = _quad(f, 0.0, min(1.0, ratio))
    if ratio <= 1.0:
        return head
    # tail decays like v^{-(1+alpha)p}; integrate in log coordinates
    tail = _quad(lambda z: f(math.exp(z)) * math.exp(z), 0.0, math.log(ratio))
    return head + tail


def _assumption1_terms(spec: _Kernel, t: float, t2: float, p: float) -> float:
    """``int_0^t |K(s,t2)-K(s,t)|^p ds + int_t^t2 |K(s,t2)|^p ds``."""
    h = t2 - t
    if isinstance(spec, Constant):
        return abs(spec.c) ** p * h
    if isinstance(spec, ExpConvolution):
        c, lam = abs(spec.c), spec.lam
        if lam == 0.0:
            return c ** p * h
        first = c ** p * (1 - math.exp(-lam * h)) ** p * (1 - math.exp(-lam * p * t)) / (lam * p)
        second = c ** p * (1 - math.exp(-lam * p * h)) / (lam * p)
        return first + second
    if isinstance(spec, Fractional):
        a = spec.alpha
        if a * p >= 1.0:
            return math.inf
        scale = h ** (1.0 - a * p)
        second = scale / (1.0 - a * p)
        first = 0.0 if t == 0.0 else scale * _fractional_history_integral(a, p, t / h)
        return first + second
    first = _quad(lambda s: abs(float(spec.values(s, t2)) - float(spec.values(s, t))) ** p, 0.0, t)
    second = _quad(lambda s: abs(float(spec.values(s, t2))) ** p, t, t2)
    return first + second


def sample_pairs(T: float, n_pairs: int, seed: int) -> np.ndarray:
    """Stratified pairs ``(t, t')``: half with gaps log-uniform in [1e-6, 1e-1]*T."""
    rng = np.random.default_rng(seed)
    n_short = (n_pairs + 1) // 2
    n_long = n_pairs - n_short
    gaps = T * 10.0 ** rng.uniform(-6.0, -1.0, size=n_short)
    starts = rng.uniform(0.0, 1.0, size=n_short) * (T - gaps)
    short = np.column_stack([starts, starts + gaps])
    u = np.sort(rng.uniform(0.0, T, size=(n_long, 2)), axis=1)
    u[:, 1] = np.maximum(u[:, 1], u[:, 0] + 1e-6 * T)
    u[:, 1] = np.minimum(u[:, 1], T)
    return np.vstack([short, u])


DIVERGENCE_TOL = 0.05


def verify_assumption_singular(spec: _Kernel, gamma: float, epsilon: float,
                               n_pairs: int = 64, seed: int = 0) -> KernelAssumptionReport:
    """Sampled check of the integrability/Hoelder condition for (possibly) singular kernels.

    For each sampled pair and each exponent ``p in {1+eps, 2+eps}`` the ratio of
    the kernel increment integrals to ``|t'-t|^(gamma*p)`` is computed; the
    estimated constant is their maximum.  Because finitely many samples always
    give a finite maximum, divergence is detected from the log-log slope of the
    ratio over the short-gap stratum: a slope below ``-DIVERGENCE_TOL`` means
    the ratio blows up as ``t' -> t`` and the constant is reported as infinite.
    """
    if not 0.0 < gamma <= 0.5:
        raise ConfigError(f"gamma must lie in (0, 1/2], got {gamma}")
    if not epsilon > 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    T = spec.horizon or 1.0
    pairs = sample_pairs(T, n_pairs, seed)
    gaps = pairs[:, 1] - pairs[:, 0]
    per_exponent = {}
    worst = (0.0, (float(pairs[0, 0]), float(pairs[0, 1])))
    for name, p in (("drift", 1.0 + epsilon), ("diffusion", 2.0 + epsilon)):
        ratios = np.array([
            _assumption1_terms(spec, float(t), float(t2), p) / (t2 - t) ** (gamma * p)
            for t, t2 in pairs
        ])
        sampled = float(np.max(ratios))
        short = (gaps <= 1e-2 * T) & np.isfinite(ratios) & (ratios > 0)
        slope = float("nan")
        if short.sum() >= 3:
            slope = float(np.polyfit(np.log(gaps[short]), np.log(ratios[short]), 1)[0])
        diverges = (not np.isfinite(sampled)) or (np.isfinite(slope) and slope < -DIVERGENCE_TOL)
        L = math.inf if diverges else sampled
        per_exponent[name] = {"L": L, "sampled_max_ratio": sampled,
                              "short_gap_loglog_slope": slope, "exponent": p}
        i = int(np.nanargmax(np.where(np.isfinite(ratios), ratios, np.inf)))
        if L >= worst[0]:
            worst = (L, (float(pairs[i, 0]), float(pairs[i, 1])))
    L = max(v["L"] for v in per_exponent.values())
    return KernelAssumptionReport(
        assumption_id=AssumptionId.SINGULAR,
        satisfied=bool(np.isfinite(L)),
        estimated_L=float(L),
        worst_pair=worst[1],
        samples_checked=int(len(pairs)),
        details={"per_inequality": per_exponent, "gamma": gamma, "epsilon": epsilon},
    )


def fractional_gamma_bound(alpha: float, epsilon: float) -> float:
    """Largest admissible ``gamma`` for ``(t-s)^-alpha`` (non-positive: inadmissible)."""
    return min(1.0 / (1.0 + epsilon), 1.0 / (2.0 + epsilon)) - alpha


def verify_assumption_smooth(spec: _Kernel, assumption: str = "smooth",
                             n_grid: int = 512) -> KernelAssumptionReport:
    """Finite-difference check of the regularity bounds for non-singular kernels.

    Reports the minimum of ``|K(t, t)|`` as the lower diagonal constant and the
    largest of the derivative bounds as ``estimated_L``.
    """
    if spec.is_singular:
        raise SingularKernelRejected(f"{spec.family} kernel is singular")
    T = spec.horizon or 1.0
    x = np.linspace(0.0, T, n_grid)
    h = x[1] - x[0]
    S, U = np.meshgrid(x, x, indexing="ij")  # K[i, j] = K(s_i, u_j)
    K = np.asarray(spec.values(S, U), dtype=float)
    upper = U >= S

    d2 = np.full_like(K, np.nan)
    d2[:, :-1] = (K[:, 1:] - K[:, :-1]) / h
    d1 = np.full_like(K, np.nan)
    d1[:-1, :] = (K[1:, :] - K[:-1, :]) / h
    mixed = np.full_like(K, np.nan)
    mixed[:-1, :-1] = (K[1:, 1:] - K[1:, :-1] - K[:-1, 1:] + K[:-1, :-1]) / h ** 2

    def sup(a, mask):
        vals = np.abs(np.where(mask, a, np.nan))
        if np.all(np.isnan(vals)):
            return 0.0, (0.0, 0.0)
        idx = np.unravel_index(np.nanargmax(vals), vals.shape)
        return float(vals[idx]), (float(x[idx[0]]), float(x[idx[1]]))

    sup_d2, at_d2 = sup(d2, upper)
    sup_d1, at_d1 = sup(d1, U > S)
    diag_d2 = np.abs(np.diag(d2)[:-1])
    sup_diag = float(np.max(diag_d2)) if diag_d2.size else 0.0
    # int_s^t |d21 K(s, u)| du, maximised over t = T (integrand is non-negative)
    mixed_rows = np.where(U > S, np.abs(mixed), 0.0)
    mixed_rows = np.nan_to_num(mixed_rows)
    sup_mixed = float(np.max(mixed_rows.sum(axis=1) * h))
    diag = np.abs(np.diag(K))
    c1 = float(np.min(diag))
    c1_at = float(x[int(np.argmin(diag))])

    bounds = {"sup_d2_K": sup_d2, "sup_d1_K": sup_d1, "sup_d2_K_diag": sup_diag,
              "sup_int_d21_K": sup_mixed}
    L = max(bounds.values())
    finite = all(np.isfinite(v) for v in bounds.values())
    if assumption == "convolutional":
        aid = AssumptionId.CONVOLUTIONAL
        satisfied = spec.is_convolutional and np.isfinite(sup_d2)
    elif assumption == "smooth":
        aid = AssumptionId.SMOOTH
        satisfied = finite and c1 > 0.0
    else:
        raise ConfigError(f"unknown assumption {assumption!r}")
    worst = (c1_at, c1_at) if c1 <= 0.0 else (at_d2 if sup_d2 >= sup_d1 else at_d1)
    return KernelAssumptionReport(
        assumption_id=aid,
        satisfied=bool(satisfied),
        estimated_L=float(L),
        worst_pair=worst,
        samples_checked=int(upper.sum()),
        details={"c1_estimate": c1, **bounds},
    )
