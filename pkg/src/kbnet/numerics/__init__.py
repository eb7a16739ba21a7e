from kbnet.numerics.tensor import Tape, Tensor, as_tensor, backward, no_grad
from kbnet.numerics.gradcheck import finite_diff_check
from kbnet.numerics import ops, kernels

__all__ = ["Tape", "Tensor", "as_tensor", "backward", "no_grad", "finite_diff_check", "ops", "kernels"]
