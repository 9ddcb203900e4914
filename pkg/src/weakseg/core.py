"""Domain types and box geometry shared across the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

BACKGROUND = 0
FOREGROUND = 1
UNCERTAIN = 255
LABEL_CODES = (BACKGROUND, FOREGROUND, UNCERTAIN)

SCRIPTS = ("latin", "non_latin", "unknown")

Rect = Tuple[int, int, int, int]
Quad = Tuple[Tuple[float, float], ...]


class GeometryError(ValueError):
    pass


def _quad_area(quad: Sequence[Sequence[float]]) -> float:
    area = 0.0
    for i in range(len(quad)):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % len(quad)]
        area += x0 * y1 - x1 * y0
    return area / 2.0


@dataclass(frozen=True)
class TextBox:
    """A text region, either an axis-aligned rect or a quadrilateral.

    ``rect`` is ``(x, y, w, h)`` in pixels, ``quad`` four ``(x, y)``
    vertices. Exactly one of the two must be given.
    """

    rect: Optional[Rect] = None
    quad: Optional[Quad] = None
    legible: bool = True
    machine_printed: bool = True
    script: str = "latin"
    transcription: Optional[str] = None

    def __post_init__(self):
        if (self.rect is None) == (self.quad is None):
            raise GeometryError("TextBox needs exactly one of rect or quad")
        if self.script not in SCRIPTS:
            raise ValueError(f"unknown script {self.script!r}")
        if self.rect is not None:
            rect = tuple(int(v) for v in self.rect)
            if len(rect) != 4:
                raise GeometryError("rect must have 4 values")
            if rect[2] <= 0 or rect[3] <= 0:
                raise GeometryError("degenerate box")
            object.__setattr__(self, "rect", rect)
        else:
            quad = tuple((float(x), float(y)) for x, y in self.quad)
            if len(quad) != 4:
                raise GeometryError("quad must have 4 vertices")
            if abs(_quad_area(quad)) <= 0.0:
                raise GeometryError("degenerate quad")
            object.__setattr__(self, "quad", quad)

    @property
    def qualifies(self) -> bool:
        """True for legible, machine-printed, Latin-script boxes."""
        return self.legible and self.machine_printed and self.script == "latin"

    def bounds(self) -> Rect:
        """Smallest integer rect enclosing the box."""
        if self.rect is not None:
            return self.rect
        xs = [p[0] for p in self.quad]
        ys = [p[1] for p in self.quad]
        x0, y0 = math.floor(min(xs)), math.floor(min(ys))
        x1, y1 = math.ceil(max(xs)), math.ceil(max(ys))
        return (x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))

    def mask(self, image_size: Tuple[int, int]) -> np.ndarray:
        """Boolean membership mask of shape (height, width)."""
        width, height = image_size
        if self.quad is not None:
            return rasterize_quad(self.quad, image_size)
        x, y, w, h = self.rect
        out = np.zeros((height, width), dtype=bool)
        out[max(y, 0):max(min(y + h, height), 0), max(x, 0):max(min(x + w, width), 0)] = True
        return out

    def to_dict(self) -> dict:
        d = {}
        if self.rect is not None:
            d["rect"] = list(self.rect)
        else:
            d["quad"] = [list(p) for p in self.quad]
        d["legible"] = self.legible
        d["machine_printed"] = self.machine_printed
        d["script"] = self.script
        d["transcription"] = self.transcription
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TextBox":
        quad = d.get("quad")
        return cls(
            rect=tuple(d["rect"]) if d.get("rect") is not None else None,
            quad=tuple(tuple(p) for p in quad) if quad is not None else None,
            legible=bool(d.get("legible", True)),
            machine_printed=bool(d.get("machine_printed", True)),
            script=d.get("script", "unknown"),
            transcription=d.get("transcription"),
        )


def validate_labels(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    bad = ~np.isin(data, LABEL_CODES)
    if bad.any():
        values = sorted(set(np.unique(data[bad]).tolist()))[:5]
        raise ValueError(f"label map holds values outside {{0, 1, 255}}: {values}")
    return data.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel BACKGROUND / FOREGROUND / UNCERTAIN annotation."""

    data: np.ndarray

    def __post_init__(self):
        data = validate_labels(self.data)
        if data.ndim != 2:
            raise ValueError("label map must be 2-D")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def counts(self) -> dict:
        return {code: int((self.data == code).sum()) for code in LABEL_CODES}


@dataclass
class ProbabilityCanvas:
    """Full-image foreground probability accumulator with max fusion."""

    prob: np.ndarray
    touched: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=np.float64)
        if self.touched is None:
            self.touched = self.prob > 0
        self.touched = np.asarray(self.touched, dtype=bool)
        if self.prob.shape != self.touched.shape:
            raise ValueError("prob and touched must have the same shape")
        if self.prob.size and (self.prob.min() < 0 or self.prob.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if (self.prob[~self.touched] != 0).any():
            raise ValueError("untouched pixels must have probability 0")

    @classmethod
    def empty(cls, width: int, height: int) -> "ProbabilityCanvas":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.prob.shape[0]

    @property
    def width(self) -> int:
        return self.prob.shape[1]

    def copy(self) -> "ProbabilityCanvas":
        return ProbabilityCanvas(self.prob.copy(), self.touched.copy())


def clamp_rect(rect: Rect, image_size: Tuple[int, int]) -> Rect:
    """Intersect ``rect`` with the image; may return zero width/height."""
    width, height = image_size
    x, y, w, h = rect
    x0, y0 = min(max(x, 0), width), min(max(y, 0), height)
    x1, y1 = min(max(x + w, 0), width), min(max(y + h, 0), height)
    return (x0, y0, x1 - x0, y1 - y0)


def _grow(start: int, extent: int, factor: float) -> Tuple[int, int]:
    # small epsilon keeps e.g. 20 * 1.3 from ceiling to 27
    new = max(extent, math.ceil(extent * (1.0 + factor) - 1e-9))
    return start - (new - extent) // 2, new


def enlarge_box(box: Rect, factor: float, image_size: Tuple[int, int]) -> Rect:
    """Grow ``box`` by ``factor`` of each side length, centred, then clamp.

    The enlarged extent is ``ceil(w * (1 + factor))``; the extra pixels are
    split evenly with the odd pixel going to the far side. Expansion lost
    beyond the image border is not redistributed.
    """
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise GeometryError("degenerate box")
    if factor < 0:
        raise ValueError("enlargement factor must be >= 0")
    nx, nw = _grow(x, w, factor)
    ny, nh = _grow(y, h, factor)
    out = clamp_rect((nx, ny, nw, nh), image_size)
    if out[2] <= 0 or out[3] <= 0:
        raise GeometryError(f"box {box} lies outside image of size {image_size}")
    return out


def rasterize_quad(quad: Sequence[Sequence[float]], image_size: Tuple[int, int]) -> np.ndarray:
    """Mask of pixels whose centre lies inside ``quad`` (even-odd rule).

    Centres exactly on an edge count as inside.
    """
    width, height = image_size
    pts = np.asarray(quad, dtype=np.float64)
    if pts.shape != (4, 2):
        raise GeometryError("quad must have 4 vertices")
    if abs(_quad_area(pts.tolist())) <= 0.0:
        raise GeometryError("degenerate quad")

    mask = np.zeros((height, width), dtype=bool)
    x0 = max(int(math.floor(pts[:, 0].min())), 0)
    x1 = min(int(math.ceil(pts[:, 0].max())) + 1, width)
    y0 = max(int(math.floor(pts[:, 1].min())), 0)
    y1 = min(int(math.ceil(pts[:, 1].max())) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return mask

    px, py = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    for i in range(4):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % 4]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        within = (
            (px >= min(ax, bx) - 1e-12) & (px <= max(ax, bx) + 1e-12)
            & (py >= min(ay, by) - 1e-12) & (py <= max(ay, by) + 1e-12)
        )
        on_edge |= (np.abs(cross) <= 1e-9) & within
        if ay != by:
            straddles = (ay > py) != (by > py)
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= straddles & (px < x_cross)
    mask[y0:y1, x0:x1] = inside | on_edge
    return mask
