"""Shared argument and shape validation helpers."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An array shape violates an operation's contract."""


class DegenerateMatrixError(ValueError):
    """A matrix argument is degenerate (e.g. zero Gram matrix)."""


def check_divisible(size: int, factor: int, axis: str) -> None:
    if factor < 1:
        raise ShapeError(f"{axis} factor must be >= 1, got {factor}")
    if size % factor != 0:
        raise ShapeError(f"{axis} size {size} is not divisible by factor {factor}")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def check_choice(value: str, allowed: tuple[str, ...], name: str) -> None:
    if value not in allowed:
        raise ValueError(f"{name} must be one of {allowed}, got {value!r}")


def as_field(x, name: str = "field") -> np.ndarray:
    """Return the T x H x W float array behind a grid-like argument."""
    data = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"{name} must be a 3-d (T, H, W) array, got ndim={data.ndim}")
    return data
