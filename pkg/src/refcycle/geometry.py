"""Axis-aligned box arithmetic, IoU, coordinate quantization, and the
textual box representation (serialize to a template, parse back by regex).

All values are immutable after construction and every function here is pure,
so the module is safe to use from any number of threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class BBox:
    """Box with normalized corner coordinates in [0, 1], x_min <= x_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x_min <= self.x_max <= 1.0):
            raise ValueError(f"invalid x range: [{self.x_min}, {self.x_max}]")
        if not (0.0 <= self.y_min <= self.y_max <= 1.0):
            raise ValueError(f"invalid y range: [{self.y_min}, {self.y_max}]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class QuantizedBBox:
    """Box with integer corner coordinates on the grid [0, R]."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"non-monotone quantized box: {self.as_tuple()}")
        if min(self.as_tuple()) < 0:
            raise ValueError(f"negative quantized coordinate: {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def validate_range(self, range_max: int) -> None:
        if max(self.as_tuple()) > range_max:
            raise ValueError(
                f"coordinate exceeds range {range_max}: {self.as_tuple()}"
            )


@dataclass(frozen=True)
class CoordFormat:
    """Textual box convention: a template with four integer slots, the regex
    that extracts them, and the quantization range the integers live on.

    serialize_bbox followed by parse_bbox under the same format is the
    identity on any valid QuantizedBBox.
    """

    template: str = "<box>({x1},{y1}),({x2},{y2})</box>"
    pattern: str = r"<box>\((\d+),(\d+)\),\((\d+),(\d+)\)</box>"
    range_max: int = 1000

    def __post_init__(self) -> None:
        if self.range_max < 1:
            raise ValueError("range_max must be >= 1")
        for slot in ("{x1}", "{y1}", "{x2}", "{y2}"):
            if slot not in self.template:
                raise ValueError(f"template missing slot {slot}")
        if re.compile(self.pattern).groups != 4:
            raise ValueError("pattern must capture exactly four integers")

    @classmethod
    def from_dict(cls, d: dict) -> "CoordFormat":
        return cls(
            template=d.get("template", cls.template),
            pattern=d.get("pattern", cls.pattern),
            range_max=int(d.get("range_max", cls.range_max)),
        )

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "pattern": self.pattern,
            "range_max": self.range_max,
        }


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area, in [0, 1].

    When the union has zero area (both boxes degenerate) the result is
    defined as 0, which keeps downstream rewards bounded.
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _round_half_away(x: float) -> int:
    # Coordinates are non-negative, so half away from zero is floor(x + 0.5).
    return int(math.floor(x + 0.5))


def quantize(b: BBox, range_max: int) -> QuantizedBBox:
    """Scale each coordinate by range_max and round half away from zero."""
    if range_max < 1:
        raise ValueError("range_max must be >= 1")
    return QuantizedBBox(
        _round_half_away(b.x_min * range_max),
        _round_half_away(b.y_min * range_max),
        _round_half_away(b.x_max * range_max),
        _round_half_away(b.y_max * range_max),
    )


def dequantize(q: QuantizedBBox, range_max: int) -> BBox:
    """Map integer grid coordinates back to fractions of the unit square."""
    q.validate_range(range_max)
    r = float(range_max)
    return BBox(q.x_min / r, q.y_min / r, q.x_max / r, q.y_max / r)


def serialize_bbox(q: QuantizedBBox, fmt: CoordFormat = CoordFormat()) -> str:
    """Render a quantized box as text by filling the format's template."""
    q.validate_range(fmt.range_max)
    return fmt.template.format(
        x1=q.x_min, y1=q.y_min, x2=q.x_max, y2=q.y_max
    )


def parse_bbox(text: str, fmt: CoordFormat = CoordFormat()) -> Optional[QuantizedBBox]:
    """Extract the first box match from arbitrary text.

    Returns None when the pattern does not match, a coordinate exceeds the
    format's range, or the corners are not monotone. None is a value, not an
    error: the caller treats it as the zero-reward path.
    """
    m = re.search(fmt.pattern, text)
    if m is None:
        return None
    x1, y1, x2, y2 = (int(g) for g in m.groups())
    if max(x1, y1, x2, y2) > fmt.range_max:
        return None
    if x1 > x2 or y1 > y2:
        return None
    return QuantizedBBox(x1, y1, x2, y2)
