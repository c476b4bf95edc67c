"""Decentralized ADMM model predictive control for unicycle teams with CBF safety."""
from ._accel import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
