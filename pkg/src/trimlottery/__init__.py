"""Structured lottery-ticket trimming on a small numpy autodiff core."""
from .kernels import BACKEND

__version__ = "0.1.0"
