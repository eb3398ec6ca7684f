"""Adversarial network traffic toolkit.

Flow assembly, traffic encodings, a small numpy neural-network engine,
universal adversarial perturbation attacks against traffic classifiers and
the experiment harness that scores them.
"""
from .errors import AntError, ComputeError, DataError, IncompatibleError

__version__ = "0.1.0"

__all__ = ["AntError", "ComputeError", "DataError", "IncompatibleError", "__version__"]
