"""Integer bounding boxes on the pixel grid.

Coordinates follow the image convention: ``x`` is the column and ``y`` the
row, both inclusive.
"""
from __future__ import annotations

from dataclasses import dataclass


class BoxOutOfImage(ValueError):
    """A box has no overlap with the image it is applied to."""


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def center(self) -> tuple[float, float]:
        """(x_t, y_t): column and row midpoints."""
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clamp(self, height: int, width: int) -> "BBox":
        """Intersect with a ``height x width`` image; raises BoxOutOfImage if empty."""
        x0, x1 = max(self.x_min, 0), min(self.x_max, width - 1)
        y0, y1 = max(self.y_min, 0), min(self.y_max, height - 1)
        if x0 > x1 or y0 > y1:
            raise BoxOutOfImage(f"box {self.as_tuple()} does not intersect a {height}x{width} image")
        return BBox(x0, y0, x1, y1)

    @classmethod
    def full(cls, height: int, width: int) -> "BBox":
        return cls(0, 0, width - 1, height - 1)
