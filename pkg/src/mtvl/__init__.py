"""Multi-task vision-language network on a numpy autodiff core."""

from .tensor import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
