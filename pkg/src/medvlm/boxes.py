"""Bounding-box codec: pixel boxes, the [0,100] integer grid, and the textual
``{<x><y><x><y>}`` form embedded in model inputs and outputs.

The textual grammar is a wire format shared with training targets, the
inference service, and the browser console; it must stay byte-identical
across all of them.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional


class BoxError(ValueError):
    """Base class for codec failures."""


class InvalidBoxError(BoxError):
    """Degenerate or inverted box (zero width/height, negative coords)."""


class OutOfBoundsError(BoxError):
    """Pixel box extends beyond the associated image."""


class DegenerateBoxError(BoxError):
    """Normalized box maps to a zero-area pixel region."""


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidBoxError(f"image size must be >= 1x1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in pixel space; corners ordered left/top < right/bottom."""

    x_left: float
    y_top: float
    x_right: float
    y_bottom: float

    def validate(self, size: ImageSize) -> None:
        if min(self.x_left, self.y_top, self.x_right, self.y_bottom) < 0:
            raise InvalidBoxError(f"negative coordinate in {self}")
        if not (self.x_left < self.x_right and self.y_top < self.y_bottom):
            raise InvalidBoxError(f"degenerate or inverted box {self}")
        if self.x_right > size.width or self.y_bottom > size.height:
            raise OutOfBoundsError(f"{self} exceeds image bounds {size.width}x{size.height}")

    @property
    def area(self) -> float:
        return max(0.0, self.x_right - self.x_left) * max(0.0, self.y_bottom - self.y_top)


@dataclass(frozen=True)
class NormalizedBox:
    """Box on the integer [0,100] grid; 101 values per axis, equality allowed."""

    x_left: int
    y_top: int
    x_right: int
    y_bottom: int

    def __post_init__(self) -> None:
        for c in (self.x_left, self.y_top, self.x_right, self.y_bottom):
            if not isinstance(c, int) or not 0 <= c <= 100:
                raise InvalidBoxError(f"coordinate {c!r} outside [0,100] integer grid")
        if self.x_left > self.x_right or self.y_top > self.y_bottom:
            raise InvalidBoxError(f"inverted normalized box {self}")


@dataclass(frozen=True)
class GroundedSpan:
    """One parsed box occurrence in generated text.

    ``phrase`` is the nearest preceding run of plain text on the same line,
    or None when there is none. ``char_range`` is the half-open offset range
    of the ``{...}`` substring in the source text.
    """

    box: NormalizedBox
    char_range: tuple[int, int]
    phrase: Optional[str] = None

    def __post_init__(self) -> None:
        if self.phrase is not None and not self.phrase:
            raise ValueError("phrase must be non-empty when present")
        if self.char_range[0] < 0 or self.char_range[1] <= self.char_range[0]:
            raise ValueError(f"invalid char_range {self.char_range}")


def _round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


def normalize_box(box: PixelBox, size: ImageSize) -> NormalizedBox:
    """Map a pixel box onto the [0,100] integer grid.

    Each coordinate becomes round-half-up(coord / extent * 100), computed in
    exact rational arithmetic so that uniform integer rescaling of box and
    image leaves the result unchanged.
    """
    box.validate(size)

    def scale(coord: float, extent: int) -> int:
        v = _round_half_up(Fraction(coord) * 100 / extent)
        return min(100, max(0, v))

    return NormalizedBox(
        x_left=scale(box.x_left, size.width),
        y_top=scale(box.y_top, size.height),
        x_right=scale(box.x_right, size.width),
        y_bottom=scale(box.y_bottom, size.height),
    )


def denormalize_box(box: NormalizedBox, size: ImageSize) -> PixelBox:
    """Map a normalized box back to real-valued pixel coordinates (no rounding)."""
    if box.x_left == box.x_right or box.y_top == box.y_bottom:
        raise DegenerateBoxError(f"{box} maps to a zero-area pixel box")
    return PixelBox(
        x_left=box.x_left / 100 * size.width,
        y_top=box.y_top / 100 * size.height,
        x_right=box.x_right / 100 * size.width,
        y_bottom=box.y_bottom / 100 * size.height,
    )


def serialize_box(box: NormalizedBox) -> str:
    """Render the exact wire form ``{<a><b><c><d>}`` (decimal, no padding)."""
    return f"{{<{box.x_left}><{box.y_top}><{box.x_right}><{box.y_bottom}>}}"


_BOX_RE = re.compile(r"\{<(\d+)><(\d+)><(\d+)><(\d+)>\}")


def _preceding_phrase(text: str, start: int, prev_end: int) -> Optional[str]:
    # Nearest preceding run of non-brace text on the same line.
    segment = text[prev_end:start]
    segment = segment.rsplit("\n", 1)[-1]
    for brace in ("{", "}"):
        segment = segment.rsplit(brace, 1)[-1]
    phrase = segment.strip()
    return phrase or None


def parse_spans(text: str) -> tuple[list[GroundedSpan], int]:
    """Extract every well-formed box occurrence from arbitrary generated text.

    Returns (spans, malformed_count). A syntactic match whose coordinates lie
    outside [0,100] or are inverted counts as malformed and is skipped, never
    repaired: evaluation has to see model errors. Total on any input string.
    """
    spans: list[GroundedSpan] = []
    malformed = 0
    prev_end = 0
    for m in _BOX_RE.finditer(text):
        coords = tuple(int(g) for g in m.groups())
        ok = all(c <= 100 for c in coords) and coords[0] <= coords[2] and coords[1] <= coords[3]
        if ok:
            spans.append(
                GroundedSpan(
                    box=NormalizedBox(*coords),
                    char_range=(m.start(), m.end()),
                    phrase=_preceding_phrase(text, m.start(), prev_end),
                )
            )
        else:
            malformed += 1
        prev_end = m.end()
    return spans, malformed
