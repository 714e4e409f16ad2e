"""Strong- and weak-form learning of dynamical systems with GENERIC-structured models."""
from . import errors, estimator1d, genericnet, testfn, train, trajectory, weakform

__version__ = "0.1.0"

__all__ = ["errors", "estimator1d", "genericnet", "testfn", "train", "trajectory", "weakform", "__version__"]
