"""Tensor type, gradient tape and differentiable operators."""
from . import ops
from .gradcheck import GradCheckReport, finite_diff_check
from .ops import *  # noqa: F401,F403
from .runtime import flops, get_precision, memory, precision, set_debug, set_precision
from .tensor import DimensionError, Tape, TapeError, Tensor, as_tensor, concat, matmul, no_grad, tape
