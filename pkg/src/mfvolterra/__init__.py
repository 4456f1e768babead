"""Simulation and diagnostics for mean-field stochastic Volterra equations."""
from .errors import ConfigError, NumericalError, VolterraError
from .grid import TimeGrid
from .kernels import Constant, ExpConvolution, Fractional, SmoothConvolution, WeightMode
from .coefficients import (Affine, AffineMean, ConstantVol, HolderPower, LinearMeanField,
                           TimeModulated, Zero)
from .measures import EmpiricalMeasure, LawFlow
from .sde_engine import (Dirac, Gaussian, NoisePlan, PathEnsemble, TwoPoint, Uniform,
                         VolterraModel, simulate_frozen_law)
from .mckean import (PicardConfig, picard_solve, simulate_particle_system, synchronous_coupling)

__version__ = "0.1.0"
