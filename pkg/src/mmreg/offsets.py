"""Discrete misalignment classes laid out on an ellipse.

Class 0 is the aligned case (0, 0); the remaining N-1 classes sit at
equally spaced parameter angles on an ellipse, optionally rotated clockwise.
Screen coordinates: x right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class OffsetClass:
    """One misalignment class: integer pixel displacement of the depth plane."""

    id: int
    dx: int
    dy: int


def _round_half_away(x: float) -> int:
    return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


def generate_offsets(n_classes: int, major_axis: float, minor_axis: float,
                     rotation_deg: float = 0.0) -> list[OffsetClass]:
    """Class 0 at (0,0); classes 1..N-1 at parameter angles (i-1)*360/(N-1)
    on the ellipse with the given axes, rotated clockwise by rotation_deg,
    rounded to integers (ties away from zero).

    Raises if two classes collapse onto the same pixel after rounding.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 offset classes, got {n_classes}")
    if major_axis <= 0 or minor_axis <= 0:
        raise ValueError(f"axes must be positive, got major={major_axis}, minor={minor_axis}")

    a = major_axis / 2.0
    b = minor_axis / 2.0
    phi = math.radians(rotation_deg)
    cos_phi, sin_phi = math.cos(phi), math.sin(phi)

    offsets = [OffsetClass(id=0, dx=0, dy=0)]
    for i in range(1, n_classes):
        theta = math.radians((i - 1) * 360.0 / (n_classes - 1))
        x = a * math.cos(theta)
        y = b * math.sin(theta)
        dx = _round_half_away(x * cos_phi + y * sin_phi)
        dy = _round_half_away(-x * sin_phi + y * cos_phi)
        offsets.append(OffsetClass(id=i, dx=dx, dy=dy))

    seen: dict[tuple[int, int], int] = {}
    for off in offsets:
        key = (off.dx, off.dy)
        if key in seen:
            raise ValueError(
                f"degenerate axes: classes {seen[key]} and {off.id} both round to {key}")
        seen[key] = off.id
    return offsets
