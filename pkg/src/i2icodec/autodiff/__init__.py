from . import ops
from .params import AdamState, ParamTree, adam_step
from .tensor import ShapeError, Tensor, no_grad

__all__ = ["ops", "AdamState", "ParamTree", "adam_step", "ShapeError", "Tensor", "no_grad"]
