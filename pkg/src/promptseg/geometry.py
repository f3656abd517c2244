"""Binary masks, half-open pixel boxes, and box jitter.

Masks are plain ``uint8`` numpy arrays holding only 0/1. Boxes use the
half-open convention ``[xmin, xmax) x [ymin, ymax)`` with x along columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


def validate_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Return ``mask`` as a contiguous uint8 array after checking it is a binary 2D grid."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2D grid, got shape {arr.shape}")
    if arr.dtype == np.bool_:
        return np.ascontiguousarray(arr, dtype=np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} not binary")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def binarize_mask(grid: np.ndarray, threshold: float) -> np.ndarray:
    """Threshold a real grid with strict ``>``; 0.5 against 0.5 stays background."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"grid must be 2D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("grid contains non-finite values")
    return (arr > threshold).astype(np.uint8)


@dataclass(frozen=True, order=True)
class BBox:
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self) -> None:
        for field in ("xmin", "ymin", "xmax", "ymax"):
            value = getattr(self, field)
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"BBox.{field} must be an integer, got {value!r}")
            object.__setattr__(self, field, int(value))
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def fits(self, bounds: tuple[int, int]) -> bool:
        """True if the box lies inside an image of shape ``(H, W)``."""
        h, w = bounds
        return 0 <= self.xmin and self.xmax <= w and 0 <= self.ymin and self.ymax <= h


def mask_to_bbox(mask: np.ndarray) -> BBox:
    """Tightest half-open box around the foreground of ``mask``."""
    m = validate_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(m.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass(frozen=True)
class PerturbSpec:
    """Maximum per-edge jitter in pixels for each structure role."""

    radii: Mapping[str, int]

    def __post_init__(self) -> None:
        for role, r in self.radii.items():
            if int(r) != r or r < 0:
                raise ValueError(f"perturbation radius for {role!r} must be a non-negative integer, got {r}")

    def radius(self, role: str) -> int:
        return int(self.radii[role])


def _repair_axis(lo: int, hi: int, size: int) -> tuple[int, int]:
    if lo < hi:
        return lo, hi
    # collapse to one pixel at the midpoint of the crossed edges
    c = min(max((lo + hi) // 2, 0), size - 1)
    return c, c + 1


def perturb_bbox(
    box: BBox, radius: int, bounds: tuple[int, int], rng: np.random.Generator
) -> BBox:
    """Shift each edge by an independent uniform integer in ``[-radius, radius]``.

    The result is clamped to the image and, if an axis collapses, repaired to a
    single-pixel extent, so the output is always a valid box. Exactly four
    integers are drawn from ``rng`` (order xmin, ymin, xmax, ymax) even when
    ``radius`` is 0, keeping random streams aligned across configurations.
    """
    h, w = bounds
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not box.fits(bounds):
        raise ValueError(f"box {box.as_tuple()} does not fit in image {bounds}")
    dx0, dy0, dx1, dy1 = (int(v) for v in rng.integers(-radius, radius + 1, size=4))
    x0 = min(max(box.xmin + dx0, 0), w)
    x1 = min(max(box.xmax + dx1, 0), w)
    y0 = min(max(box.ymin + dy0, 0), h)
    y1 = min(max(box.ymax + dy1, 0), h)
    x0, x1 = _repair_axis(x0, x1, w)
    y0, y1 = _repair_axis(y0, y1, h)
    return BBox(x0, y0, x1, y1)
