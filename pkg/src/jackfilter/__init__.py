"""Adaptive jackknife filtering for continuous-discrete stochastic models.

Parameters and noise covariances are identified from a growing measurement
log by delete-d jackknife least squares; the estimates drive an ensemble
Kalman update, which takes over on its own once the noise estimates settle.
"""

from .errors import JackfilterError
from .filtering import FilterConfig, StepRecord, run_adaptive
from .model import LINEAR, LOGISTIC, MeasurementLog, ModelSpec, ThetaVector, get_model, simulate
from .numkit import RngHandle

__all__ = [
    "FilterConfig", "JackfilterError", "LINEAR", "LOGISTIC", "MeasurementLog", "ModelSpec",
    "RngHandle", "StepRecord", "ThetaVector", "get_model", "run_adaptive", "simulate",
]
__version__ = "0.1.0"
