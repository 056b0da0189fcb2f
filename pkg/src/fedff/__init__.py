"""Federated learning of a neural steering feedforward for trajectory tracking."""

from ._jit import USE_NUMBA, backend_name

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "backend_name", "__version__"]
