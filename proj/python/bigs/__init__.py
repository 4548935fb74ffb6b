"""Bidirectional gated SSM models: kernels, masked-LM training and analysis."""

from ._bigs import *  # noqa: F401,F403
from ._bigs import __doc__  # noqa: F401

__version__ = "0.1.0"
