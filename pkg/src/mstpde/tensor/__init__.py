from . import ops
from .core import DTYPE, GraphError, Node, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad
from .gradcheck import fd_check, numerical_grad
from .nn import Module, Parameter, uniform_fan_in
from .ops import forward_op
from .serialize import load_weights, save_weights

__all__ = [
    "DTYPE", "GraphError", "Module", "Node", "Parameter", "ShapeError", "Tensor",
    "as_tensor", "backward", "fd_check", "forward_op", "grad_enabled", "load_weights",
    "no_grad", "numerical_grad", "ops", "save_weights", "uniform_fan_in",
]
