"""Yamada-Watanabe approximations of ``|x|``.

Thresholds ``1 = a_0 > a_1 > ...`` satisfy ``int_{a_n}^{a_{n-1}} x^{-(1+2 xi)} dx = n``.
On each window a smooth density ``psi_n`` with ``psi_n(x) <= 2 / (n x^{1+2 xi})``
is built, and ``phi_n(x) = int_0^{|x|} int_0^y psi_n(z) dz dy``.

The bump lives in the coordinate ``u(x) = int_{a_n}^x z^{-(1+2 xi)} dz``, which
maps the window onto ``[0, n]``.  With ``psi_n = c * B(v(u(x))) * x^{-(1+2 xi)}``
the bound reads ``c * B <= 2/n`` and only involves the bump height, so it
holds on the whole window once the support scale ``s`` is large enough.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import cumulative_simpson, quad
from scipy.interpolate import PchipInterpolator

from .errors import ConfigError, InfeasibleBound, XiOutOfRange

TABLE_NODES = 4096
SCAN_POINTS = 10_000
DEFAULT_SCALE = 0.98


def _check_xi(xi: float):
    if not 0.0 <= xi <= 0.5:
        raise XiOutOfRange(f"xi must lie in [0, 1/2], got {xi}")


def compute_a_sequence(xi: float, n_max: int) -> np.ndarray:
    """``a_0 = 1`` and the closed-form recursion for ``a_1..a_{n_max}``."""
    _check_xi(xi)
    if n_max < 0:
        raise ConfigError("n_max must be >= 0")
    a = np.empty(n_max + 1)
    a[0] = 1.0
    for n in range(1, n_max + 1):
        if xi == 0.0:
            a[n] = a[n - 1] * math.exp(-n)
        else:
            a[n] = (a[n - 1] ** (-2 * xi) + 2 * xi * n) ** (-1.0 / (2 * xi))
    return a


def window_integral(xi: float, lo: float, hi: float) -> float:
    """``int_lo^hi x^{-(1+2 xi)} dx`` in closed form."""
    if xi == 0.0:
        return math.log(hi / lo)
    return (lo ** (-2 * xi) - hi ** (-2 * xi)) / (2 * xi)


# ---------------------------------------------------------------------------
# standard bump
# ---------------------------------------------------------------------------
def bump(v):
    """``exp(-1/(1 - v^2))`` on ``|v| < 1``, zero elsewhere."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    inside = np.abs(v) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - v[inside] ** 2))
    return out


BUMP_MAX = math.exp(-1.0)


@dataclass(frozen=True)
class _BumpCDF:
    mass: float
    cdf: PchipInterpolator


def _bump_cdf(n_nodes: int = 20001) -> _BumpCDF:
    mass, _ = quad(lambda v: math.exp(-1.0 / (1.0 - v * v)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13)
    v = np.linspace(-1.0, 1.0, n_nodes)
    c = cumulative_simpson(bump(v), x=v, initial=0.0)
    return _BumpCDF(mass, PchipInterpolator(v, c / c[-1]))


_BUMP = _bump_cdf()


# ---------------------------------------------------------------------------
# mollifier
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Mollifier:
    """``psi_n`` on ``(a_n, a_prev)`` with support scale ``s`` in ``u``-coordinates."""

    a_n: float
    a_prev: float
    n: int
    xi: float
    s: float

    @property
    def width(self) -> float:
        # length of the window in u-coordinates (equals n on the computed sequence)
        return window_integral(self.xi, self.a_n, self.a_prev)

    @property
    def c(self) -> float:
        return 1.0 / (self.s * 0.5 * self.width * _BUMP.mass)

    def u(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.xi == 0.0:
                return np.log(x / self.a_n)
            return (self.a_n ** (-2 * self.xi) - x ** (-2 * self.xi)) / (2 * self.xi)

    def v(self, x):
        half = 0.5 * self.width
        return (self.u(x) - half) / (self.s * half)

    def support(self) -> tuple[float, float]:
        half = 0.5 * self.width
        return self.u_inverse(half * (1 - self.s)), self.u_inverse(half * (1 + self.s))

    def u_inverse(self, u: float) -> float:
        if self.xi == 0.0:
            return self.a_n * math.exp(u)
        return (self.a_n ** (-2 * self.xi) - 2 * self.xi * u) ** (-1.0 / (2 * self.xi))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = (x > self.a_n) & (x < self.a_prev)
        xi_ = x[inside]
        out[inside] = self.c * bump(self.v(xi_)) * xi_ ** (-1.0 - 2 * self.xi)
        return out

    def bound(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 / (self.n * x ** (1.0 + 2 * self.xi))

    def antiderivative(self, y):
        """``Psi(y) = int_0^y psi``: 0 below the window, 1 above it."""
        y = np.asarray(y, dtype=float)
        out = np.where(y >= self.a_prev, 1.0, 0.0)
        inside = (y > self.a_n) & (y < self.a_prev)
        v = np.clip(self.v(y[inside]), -1.0, 1.0)
        out[inside] = np.clip(_BUMP.cdf(v), 0.0, 1.0)
        return out

    def scan(self, n_points: int = SCAN_POINTS) -> np.ndarray:
        """Interior points, uniform in ``u``, used for the pointwise bound check."""
        u = np.linspace(0.0, self.width, n_points + 2)[1:-1]
        return np.array([self.u_inverse(x) for x in u])

    def max_bound_ratio(self, n_points: int = SCAN_POINTS) -> float:
        x = self.scan(n_points)
        return float(np.max(self(x) / self.bound(x)))


def build_mollifier(a_n: float, a_prev: float, n: int, xi: float,
                    scale: float = DEFAULT_SCALE, max_iter: int = 60) -> Mollifier:
    """Normalised bump on ``(a_n, a_prev)`` meeting ``psi <= 2/(n x^{1+2 xi})``.

    Starts from support scale ``scale``; if the bound fails the scale is moved
    by bisection towards the full window.
    """
    _check_xi(xi)
    if not 0.0 < a_n < a_prev:
        raise ConfigError(f"need 0 < a_n < a_prev, got ({a_n}, {a_prev})")
    if n < 1:
        raise ConfigError("n must be >= 1")
    width = window_integral(xi, a_n, a_prev)

    def feasible(s):
        # peak of c*B is c * e^{-1}; it must not exceed 2/n
        return BUMP_MAX / (s * 0.5 * width * _BUMP.mass) <= 2.0 / n * (1 + 1e-12)

    s = scale
    if not feasible(s):
        lo, hi = s, 1.0
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        s = hi
        if not feasible(s) or s >= 1.0:
            raise InfeasibleBound(f"no support scale meets the bound for n={n}, xi={xi}")
    return Mollifier(a_n, a_prev, n, xi, s)


# ---------------------------------------------------------------------------
# sequence
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PhiTable:
    y: np.ndarray
    phi: np.ndarray
    interp: PchipInterpolator


@dataclass(eq=False)
class YWSequence:
    xi: float
    n_max: int
    a: np.ndarray = field(init=False)

    def __post_init__(self):
        self.a = compute_a_sequence(self.xi, self.n_max)
        self._molls = {}
        self._tables = {}

    def psi(self, n: int) -> Mollifier:
        self._check_n(n)
        if n not in self._molls:
            self._molls[n] = build_mollifier(self.a[n], self.a[n - 1], n, self.xi)
        return self._molls[n]

    def _check_n(self, n: int):
        if not 1 <= n <= self.n_max:
            raise ConfigError(f"n must lie in 1..{self.n_max}, got {n}")

    def table(self, n: int) -> PhiTable:
        """``phi_n`` on a log-spaced grid over the window, integrated in log coordinates."""
        if n not in self._tables:
            m = self.psi(n)
            t = np.linspace(math.log(m.a_n), math.log(m.a_prev), TABLE_NODES)
            y = np.exp(t)
            y[0], y[-1] = m.a_n, m.a_prev
            phi = cumulative_simpson(m.antiderivative(y) * y, x=t, initial=0.0)
            self._tables[n] = PhiTable(y, phi, PchipInterpolator(y, phi))
        return self._tables[n]

    @cached_property
    def offsets(self) -> np.ndarray:
        """``c_n = a_{n-1} - phi_n(a_{n-1})`` so that ``phi_n(x) = |x| - c_n`` beyond the window."""
        return np.array([np.nan] + [self.a[n - 1] - self.table(n).phi[-1]
                                    for n in range(1, self.n_max + 1)])


def phi_n(x, seq: YWSequence, n: int):
    """``phi_n(x)``: even, zero on ``[-a_n, a_n]``, slope one beyond ``a_{n-1}``."""
    tab = seq.table(n)
    ax = np.abs(np.asarray(x, dtype=float))
    a_n, a_prev = seq.a[n], seq.a[n - 1]
    out = np.where(ax >= a_prev, ax - a_prev + tab.phi[-1], 0.0)
    inside = (ax > a_n) & (ax < a_prev)
    out[inside] = tab.interp(ax[inside])
    return out if out.ndim else float(out)


def phi_n_prime(x, seq: YWSequence, n: int):
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * seq.psi(n).antiderivative(np.abs(x))
    return out if out.ndim else float(out)


def phi_n_second(x, seq: YWSequence, n: int):
    out = seq.psi(n)(np.abs(np.asarray(x, dtype=float)))
    return out if out.ndim else float(out)


def dump_table(seq: YWSequence, n: int, x) -> np.ndarray:
    """Columns ``x, phi_n, phi_n', phi_n''``."""
    x = np.asarray(x, dtype=float)
    return np.column_stack([x, phi_n(x, seq, n), phi_n_prime(x, seq, n), phi_n_second(x, seq, n)])
