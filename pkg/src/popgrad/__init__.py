"""Population gradients and the baselines they are measured against, at desk scale."""

from .errors import ConfigError, DataError, NumericDivergenceError, UsageError
from .models import ModelSpec, build, dropout_sites, scale_width
from .optim import OptimizerConfig, apply_update, lr_schedule
from .population import (GradQualityReport, PopulationGradSpec, gradient_quality, perturb,
                         population_gradient)
from .regsched import activation_penalty, configure_dropout, interpolate
from .tensor import Tape, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericDivergenceError", "UsageError",
    "ModelSpec", "build", "dropout_sites", "scale_width",
    "OptimizerConfig", "apply_update", "lr_schedule",
    "GradQualityReport", "PopulationGradSpec", "gradient_quality", "perturb", "population_gradient",
    "activation_penalty", "configure_dropout", "interpolate",
    "Tape", "backward", "finite_diff_grad",
]
