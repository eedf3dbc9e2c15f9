from . import ops
from .checkpoint import CheckpointError
from .gradcheck import gradient_check, numeric_gradient, relative_error, tape_gradient
from .optim import Adam, RMSprop, step_decay
from .tensor import (
    ParamTensor,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    new_tape,
    no_grad,
    param,
)

__all__ = [
    "Adam", "CheckpointError", "ParamTensor", "RMSprop", "ShapeError", "Tape", "Tensor",
    "as_tensor", "backward", "current_tape", "gradient_check", "new_tape", "no_grad",
    "numeric_gradient", "ops", "param", "relative_error", "step_decay", "tape_gradient",
]
