"""Anti-aliased 2D shape rasterizer shared by the synthetic corpus and the toy environment.

Shapes are drawn from signed distance functions evaluated at pixel centres;
pixel coverage is ``clip(0.5 - distance, 0, 1)`` so edges are one pixel soft and
positions are recoverable with sub-pixel precision.

Note (RU): Растеризатор фигур с субпиксельным сглаживанием.
"""

from typing import Sequence, Tuple, Union

import numpy as np

SHAPES: Tuple[str, ...] = ("circle", "square", "triangle", "cross", "ring", "diamond")

Color = Sequence[float]


class Canvas:
    """RGB float canvas with coordinates normalized to ``[0, 1]``.

    ``x`` runs left to right and ``y`` top to bottom; sizes are fractions of the
    shorter image side.

    Args:
        height: Image height in pixels.
        width: Image width in pixels.
        background: Either an RGB triple or an ``H×W×3`` array.

    Note (RU): Холст RGB с нормированными координатами.
    """

    def __init__(
        self,
        height: int,
        width: int,
        background: Union[Color, np.ndarray] = (0.5, 0.5, 0.5),
    ) -> None:
        if height <= 0 or width <= 0:
            raise ValueError(f"Canvas size must be positive, got {height}×{width}")
        self.height = height
        self.width = width
        self.unit = float(min(height, width))
        bg = np.asarray(background, dtype=np.float64)
        self.pixels = np.broadcast_to(bg, (height, width, 3)).astype(np.float64).copy()
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        self._px = xs + 0.5
        self._py = ys + 0.5

    def _local(self, center: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
        cx = center[0] * self.width
        cy = center[1] * self.height
        return self._px - cx, self._py - cy

    def _sdf(self, shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
        if shape == "circle":
            return np.hypot(dx, dy) - r
        if shape == "square":
            return _box(dx, dy, r * 0.85, r * 0.85)
        if shape == "triangle":
            # equilateral, pointing up, as the max of three edge half-planes
            k = np.sqrt(3.0)
            return np.maximum.reduce(
                [
                    dy - r * 0.5,
                    (k * dx - dy) / 2.0 - r * 0.5,
                    (-k * dx - dy) / 2.0 - r * 0.5,
                ]
            )
        if shape == "cross":
            arm = r * 0.32
            return np.minimum(_box(dx, dy, r, arm), _box(dx, dy, arm, r))
        if shape == "ring":
            return np.abs(np.hypot(dx, dy) - r * 0.75) - r * 0.25
        if shape == "diamond":
            return (np.abs(dx) + np.abs(dy) - r) / np.sqrt(2.0)
        if shape == "rect":
            return _box(dx, dy, r, r)
        raise ValueError(f"Unknown shape: {shape}")

    def coverage(self, shape: str, center: Tuple[float, float], size: float) -> np.ndarray:
        """Per-pixel coverage in ``[0, 1]`` of a shape of radius ``size``."""
        dx, dy = self._local(center)
        sd = self._sdf(shape, dx, dy, size * self.unit)
        return np.clip(0.5 - sd, 0.0, 1.0)

    def draw(self, shape: str, center: Tuple[float, float], size: float, color: Color) -> None:
        """Alpha-composite a filled shape onto the canvas."""
        self._blend(self.coverage(shape, center, size), color)

    def draw_box(
        self, center: Tuple[float, float], half_w: float, half_h: float, color: Color
    ) -> None:
        """Axis-aligned rectangle with half extents in normalized units."""
        dx, dy = self._local(center)
        sd = _box(dx, dy, half_w * self.width, half_h * self.height)
        self._blend(np.clip(0.5 - sd, 0.0, 1.0), color)

    def _blend(self, alpha: np.ndarray, color: Color) -> None:
        rgb = np.asarray(color, dtype=np.float64).reshape(1, 1, 3)
        a = alpha[..., None]
        self.pixels = self.pixels * (1.0 - a) + rgb * a

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)


def _box(dx: np.ndarray, dy: np.ndarray, hx: float, hy: float) -> np.ndarray:
    qx = np.abs(dx) - hx
    qy = np.abs(dy) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV-style chroma ``max(rgb) - min(rgb)`` per pixel."""
    return pixels.max(axis=-1) - pixels.min(axis=-1)


def shape_centroid(pixels: np.ndarray) -> Tuple[float, float]:
    """Chroma-weighted centroid ``(x, y)`` in normalized coordinates.

    Backgrounds of the synthetic corpus are gray, so only the coloured shape
    contributes.

    Note (RU): Центр масс цветной фигуры.
    """
    weight = saturation(np.asarray(pixels, dtype=np.float64))
    total = weight.sum()
    if total <= 0:
        return float("nan"), float("nan")
    h, w = weight.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = float(((xs + 0.5) * weight).sum() / total) / w
    cy = float(((ys + 0.5) * weight).sum() / total) / h
    return cx, cy
