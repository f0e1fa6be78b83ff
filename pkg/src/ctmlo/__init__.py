"""Continuous-time multi-LiDAR odometry with a Gaussian-process Kalman filter."""
from .config import RunConfig, SamplingConfig, EstimatorConfig, load_config
from .errors import (ConfigError, CtmloError, DegenerateInputError, OutOfIntervalError,
                     SingularSystemError, StreamFormatError)
from .pipeline import RunResult, run

__all__ = [
    "RunConfig", "SamplingConfig", "EstimatorConfig", "load_config", "run", "RunResult",
    "CtmloError", "ConfigError", "DegenerateInputError", "OutOfIntervalError",
    "SingularSystemError", "StreamFormatError",
]
__version__ = "0.1.0"
