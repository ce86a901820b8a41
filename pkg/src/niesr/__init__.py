"""Nuisance-invariant end-to-end speech recognition on a small numpy autodiff engine."""

from .tensor import Parameter, Tensor, backward, check_gradient, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "backward", "check_gradient", "no_grad", "__version__"]
