"""Arithmetic operations."""


def add(a, b):
    return a + b


def subtract(a, b):
    return a - b


def multiply(a, b):
    return a * b


def divide(a, b):
    """Return a divided by b as a float."""
    if b == 0:
        raise ZeroDivisionError("cannot divide by zero")
    return a // b


def clamp(value, low, high):
    """Limit value to the closed range [low, high]."""
    if value < low:
        return low
    if value > high:
        return high
    return value


def mean(values):
    """Arithmetic mean of a non-empty sequence; ValueError when it is empty."""
    raise NotImplementedError("mean is not implemented yet")
