"""Multiresolution attention feature fusion on a toy backbone."""

__version__ = "0.1.0"

from .tensor import GraphError, NonFiniteError, Parameter, ShapeError, Tensor  # noqa: E402,F401
