"""Layered knowledge distillation for transformer encoders on extractive QA."""

__version__ = "0.1.0"
