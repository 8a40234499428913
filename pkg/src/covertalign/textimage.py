"""Rasterize a command string into a tight binary text image.

Glyphs are laid out left to right with per-glyph advances, wrapping to a new
line when the next glyph would cross the wrap width. The composed raster is
cropped to the smallest box containing all ink and replicated across
channels; values are exactly 0 or 1 with no anti-aliasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fonts import GLYPH_SIZE, GlyphFont, default_font

DEFAULT_WRAP_WIDTH = 10 * GLYPH_SIZE  # ten glyphs per line


@dataclass(frozen=True)
class TextImage:
    """Binary raster (channels, h_t, w_t) with its source string."""

    raster: np.ndarray
    text: str

    def __post_init__(self):
        if self.raster.ndim != 3:
            raise ValueError(f"raster must be (C, h, w), got shape {self.raster.shape}")
        self.raster.flags.writeable = False

    @property
    def height(self) -> int:
        return self.raster.shape[1]

    @property
    def width(self) -> int:
        return self.raster.shape[2]

    @property
    def ink_fraction(self) -> float:
        return float(self.raster[0].mean())


def tight_crop(raster: np.ndarray) -> np.ndarray:
    """Smallest bounding box of the 1-valued pixels of a 2-D binary raster."""
    if raster.ndim != 2:
        raise ValueError(f"tight_crop expects a 2-D raster, got shape {raster.shape}")
    rows = np.nonzero(raster.any(axis=1))[0]
    cols = np.nonzero(raster.any(axis=0))[0]
    if rows.size == 0:
        raise ValueError("tight_crop: raster contains no ink")
    return raster[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def render_text(command: str, font: GlyphFont | None = None,
                wrap_width: int = DEFAULT_WRAP_WIDTH, channels: int = 3) -> TextImage:
    """Render a printable-ASCII command into a tight TextImage.

    wrap_width is in pixels and must fit at least one glyph. Deterministic
    and pure: identical inputs produce bit-identical rasters.
    """
    if font is None:
        font = default_font()
    if not command:
        raise ValueError("render_text: empty command")
    for ch in command:
        if ch not in font:
            raise ValueError(f"render_text: unsupported character {ch!r}")
    if wrap_width < GLYPH_SIZE:
        raise ValueError(f"render_text: wrap_width {wrap_width} below one glyph width")

    # pen positions per character, wrapping before overflow
    placements = []
    pen_x, line = 0, 0
    for ch in command:
        adv = font.advance(ch)
        if pen_x + adv > wrap_width:
            pen_x, line = 0, line + 1
        placements.append((ch, pen_x, line))
        pen_x += adv

    height = (line + 1) * font.glyph_height
    canvas = np.zeros((height, wrap_width), dtype=np.uint8)
    for ch, x, row in placements:
        top = row * font.glyph_height
        canvas[top:top + GLYPH_SIZE, x:x + GLYPH_SIZE] |= font.bitmap(ch)

    if not canvas.any():
        raise ValueError(f"render_text: {command!r} renders no ink, nothing to crop")
    tight = tight_crop(canvas).astype(np.float32)
    raster = np.repeat(tight[None, :, :], channels, axis=0)
    return TextImage(raster=raster, text=command)
