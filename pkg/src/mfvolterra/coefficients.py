"""Drift and diffusion coefficient catalogue with known regularity constants.

Measure dependence enters the built-in families through the mean of the
measure only, which is 1-Lipschitz with respect to every ``W_p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Annotated, ClassVar, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DimensionMismatch, MeasureRequired
from .measures import EmpiricalMeasure, moment


class _Coefficient(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------
class LinearMeanField(_Coefficient):
    """``mu(t, x, rho) = a*x + b*mean(rho) + c`` componentwise."""

    family: Literal["linear_mean_field"] = "linear_mean_field"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def evaluate(self, t, x, rho):
        if self.b == 0.0:
            return self.a * x + self.c
        return self.a * x + self.b * rho.mean + self.c

    @property
    def lipschitz_x(self) -> float:
        return abs(self.a)

    @property
    def lipschitz_measure(self) -> float:
        return abs(self.b)

    @property
    def uses_measure(self) -> bool:
        return self.b != 0.0

    def growth_constant(self, mean_norm: float) -> float:
        return max(abs(self.a), abs(self.b) * mean_norm + abs(self.c))


class TimeModulated(_Coefficient):
    """``(1 + theta*sin t)`` times a linear mean-field drift."""

    family: Literal["time_modulated"] = "time_modulated"
    base: LinearMeanField
    theta: float = 0.0

    def evaluate(self, t, x, rho):
        return (1.0 + self.theta * math.sin(t)) * self.base.evaluate(t, x, rho)

    @property
    def lipschitz_x(self) -> float:
        return abs(self.base.a) * (1.0 + abs(self.theta))

    @property
    def lipschitz_measure(self) -> float:
        return abs(self.base.b) * (1.0 + abs(self.theta))

    @property
    def uses_measure(self) -> bool:
        return self.base.uses_measure

    def growth_constant(self, mean_norm: float) -> float:
        return (1.0 + abs(self.theta)) * self.base.growth_constant(mean_norm)


class Zero(_Coefficient):
    family: Literal["zero"] = "zero"
    lipschitz_x: ClassVar[float] = 0.0
    lipschitz_measure: ClassVar[float] = 0.0
    uses_measure: ClassVar[bool] = False

    def evaluate(self, t, x, rho):
        return np.zeros_like(x)

    def growth_constant(self, mean_norm: float) -> float:
        return 0.0


DriftSpec = Annotated[Union[LinearMeanField, TimeModulated, Zero], Field(discriminator="family")]


# ---------------------------------------------------------------------------
# diffusion (diagonal: noise dimension equals state dimension)
# ---------------------------------------------------------------------------
class Affine(_Coefficient):
    family: Literal["affine"] = "affine"
    s0: float = 0.0
    s1: float = 0.0
    requires_measure: ClassVar[bool] = False

    def diagonal(self, t, x, rho=None):
        return self.s0 + self.s1 * x

    @property
    def holder_exponent(self) -> float:
        return 1.0

    @property
    def holder_constant(self) -> float:
        return abs(self.s1)

    def growth_constant(self, mean_norm: float = 0.0) -> float:
        return max(abs(self.s0), abs(self.s1))


class AffineMean(_Coefficient):
    family: Literal["affine_mean"] = "affine_mean"
    s0: float = 0.0
    s1: float = 0.0
    s2: float = 0.0
    requires_measure: ClassVar[bool] = True

    def diagonal(self, t, x, rho=None):
        if rho is None:
            raise MeasureRequired("affine_mean diffusion needs the measure argument")
        return self.s0 + self.s1 * x + self.s2 * rho.mean

    @property
    def holder_exponent(self) -> float:
        return 1.0

    @property
    def holder_constant(self) -> float:
        return abs(self.s1)

    def growth_constant(self, mean_norm: float = 0.0) -> float:
        return max(abs(self.s1), abs(self.s0) + abs(self.s2) * mean_norm)


class HolderPower(_Coefficient):
    """``sigma(x) = c * |x|**eta`` with ``eta in [1/2, 1]``."""

    family: Literal["holder_power"] = "holder_power"
    c: float = Field(gt=0.0)
    eta: float = Field(ge=0.5, le=1.0)
    requires_measure: ClassVar[bool] = False

    def diagonal(self, t, x, rho=None):
        return self.c * np.abs(x) ** self.eta

    @property
    def holder_exponent(self) -> float:
        return self.eta

    @property
    def holder_constant(self) -> float:
        return self.c

    @property
    def xi(self) -> float:
        return self.eta - 0.5

    def growth_constant(self, mean_norm: float = 0.0) -> float:
        # |x|^eta <= 1 + |x| for eta in [0, 1]
        return self.c


class ConstantVol(_Coefficient):
    family: Literal["constant_vol"] = "constant_vol"
    s: float = 0.0
    requires_measure: ClassVar[bool] = False
    holder_exponent: ClassVar[float] = 1.0
    holder_constant: ClassVar[float] = 0.0

    def diagonal(self, t, x, rho=None):
        return np.full_like(np.asarray(x, dtype=float), self.s)

    def growth_constant(self, mean_norm: float = 0.0) -> float:
        return abs(self.s)


DiffusionSpec = Annotated[
    Union[Affine, AffineMean, HolderPower, ConstantVol], Field(discriminator="family")
]


def is_lipschitz(diffusion) -> bool:
    return diffusion.holder_exponent == 1.0


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------
def _vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def eval_drift(spec, t: float, x, rho: EmpiricalMeasure) -> np.ndarray:
    x = _vector(x)
    if rho.d != x.shape[0]:
        raise DimensionMismatch(f"state has d={x.shape[0]} but measure has d={rho.d}")
    return np.asarray(spec.evaluate(t, x, rho), dtype=float)


def eval_diffusion(spec, t: float, x, rho: Optional[EmpiricalMeasure] = None) -> np.ndarray:
    """Diffusion matrix (``d x d``, diagonal) at ``(t, x[, rho])``."""
    x = _vector(x)
    if rho is not None and rho.d != x.shape[0]:
        raise DimensionMismatch(f"state has d={x.shape[0]} but measure has d={rho.d}")
    if spec.requires_measure and rho is None:
        raise MeasureRequired(f"{spec.family} diffusion needs the measure argument")
    return np.diag(np.asarray(spec.diagonal(t, x, rho), dtype=float))


def estimate_holder_constant(spec, n_pairs: int = 10_000, box: float = 10.0,
                             seed: int = 0, rho: Optional[EmpiricalMeasure] = None) -> float:
    """Largest sampled ``|sigma(x) - sigma(y)| / |x - y|^eta`` over ``[-box, box]``.

    Half the pairs are uniform in the box; the rest are anchored at 0 or at a
    point with a tiny offset, where power-type ratios peak.
    """
    if n_pairs < 100:
        raise ValueError("n_pairs must be >= 100")
    if spec.requires_measure and rho is None:
        rho = EmpiricalMeasure(np.zeros((1, 1)))
    rng = np.random.default_rng(seed)
    n1 = n_pairs // 2
    n2 = (n_pairs - n1) // 2
    n3 = n_pairs - n1 - n2
    x = np.concatenate([rng.uniform(-box, box, n1), np.zeros(n2), rng.uniform(-box, box, n3)])
    y = np.concatenate([
        rng.uniform(-box, box, n1),
        rng.uniform(-box, box, n2),
        x[n1 + n2:] + 10.0 ** rng.uniform(-8, 0, n3) * rng.choice([-1.0, 1.0], n3),
    ])
    keep = x != y
    x, y = x[keep], y[keep]
    sx = spec.diagonal(0.0, x[:, None], rho)[:, 0]
    sy = spec.diagonal(0.0, y[:, None], rho)[:, 0]
    ratios = np.abs(sx - sy) / np.abs(x - y) ** spec.holder_exponent
    return float(np.max(ratios))


@dataclass(frozen=True)
class MeasureSummary:
    mean: np.ndarray
    moments: dict = field(default_factory=dict)
    sample_count: int = 0

    @classmethod
    def from_measure(cls, mu: EmpiricalMeasure, qs=(1.0, 2.0)) -> "MeasureSummary":
        return cls(mean=mu.mean.copy(), moments={float(q): moment(mu, q) for q in qs},
                   sample_count=mu.N)
