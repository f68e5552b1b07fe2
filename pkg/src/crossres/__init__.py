"""crossres: a desk-scale laboratory for cross-resolution few-step diffusion distillation."""

__version__ = "0.1.0"
