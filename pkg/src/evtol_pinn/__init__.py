"""Physics-informed residual surrogates for battery terminal voltage."""

__version__ = "0.1.0"
