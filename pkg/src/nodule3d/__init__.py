"""Joint 3D nodule segmentation / texture classification on a from-scratch numpy autodiff core,
with the downstream follow-up-class pipeline and desk-scale phantom tooling."""

from .config import RunConfig
from .errors import (DegenerateDataError, InvalidConfigError, InvalidInputError, InvalidLabelError,
                     InvalidShapeError, InvalidUseError, LoadError, MissingModelError, Nodule3DError,
                     TrainingError, UndefinedMetricError)
from .model import JointModelConfig, init_params, joint_forward
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "JointModelConfig", "init_params", "joint_forward", "Tape", "Tensor", "backward",
    "Nodule3DError", "InvalidShapeError", "InvalidConfigError", "InvalidUseError", "InvalidLabelError",
    "InvalidInputError", "DegenerateDataError", "UndefinedMetricError", "MissingModelError",
    "LoadError", "TrainingError",
]
