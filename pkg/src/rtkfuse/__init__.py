"""Carrier-phase GNSS positioning with odometry-aided EKF fusion."""

from .frames import Pose, compose, exp, log
from .fusion import FilterConfig, FusionFilter, Solution, run_fusion
from .obs_model import (EpochObservation, NoiseModel, SatelliteObservation,
                        SignalGroup, form_double_differences)
from .sim import Scenario, generate

__all__ = [
    "Pose", "compose", "exp", "log",
    "FilterConfig", "FusionFilter", "Solution", "run_fusion",
    "EpochObservation", "NoiseModel", "SatelliteObservation", "SignalGroup",
    "form_double_differences",
    "Scenario", "generate",
]

__version__ = "0.1.0"
