"""Process-informed neural network lab for crop biomass under water stress."""

__version__ = "0.1.0"

from .process import (LatentState, ProcessParams, Trajectory, growth_increment,
                      intercepted_radiation, residual, simulate, step)

__all__ = [
    "LatentState", "ProcessParams", "Trajectory", "growth_increment",
    "intercepted_radiation", "residual", "simulate", "step", "__version__",
]
