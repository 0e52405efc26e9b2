"""Self-questioning vision-language model training on a numpy autodiff engine."""

__version__ = "0.1.0"
