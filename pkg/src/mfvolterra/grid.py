from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * dt`` on ``[0, T]``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError(f"T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        # k * dt rather than linspace so that t_k is reproducible from k alone
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def t(self, k: int) -> float:
        return self.T if k == self.n_steps else k * self.dt
