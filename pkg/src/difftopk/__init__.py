"""Differentiable top-k classification: relaxed ranking operators, the
top-k cross-entropy family and splitter selection networks."""

__version__ = "0.1.0"
