"""Small arithmetic helpers."""

from calc.ops import add, clamp, divide, mean, multiply, subtract

__all__ = ["add", "clamp", "divide", "mean", "multiply", "subtract"]
