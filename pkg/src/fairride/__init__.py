"""Long-term fair ride-hailing dispatch: simulator, Q-learning dispatcher, baselines, forecaster, metrics."""

from .base import IN_TRANSIT, ConfigError, InfeasibleAssignment, InputError, Request, TrainingError
from .graph import CityGraph

__version__ = "0.1.0"

__all__ = ["IN_TRANSIT", "CityGraph", "ConfigError", "InfeasibleAssignment", "InputError", "Request",
           "TrainingError", "__version__"]
