"""Rasterization of two-shape concept images.

Each image shows two shapes whose visual attributes are controlled by a
binary concept vector (see ``datagen.CONCEPT_NAMES``), drawn at random
positions and rotations on either a black background (5 concepts) or a
two-tone striped background (9 concepts). Rendering is a pure function of
(class, concepts, seed, image size), so images can be regenerated
bit-identically from manifest records.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageChops, ImageDraw

from .errors import PlacementError

# Fixed RGB values for the named colors.
BLUE = (0, 0, 255)
YELLOW = (255, 255, 0)
RED = (255, 0, 0)
WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
MAGENTA = (255, 0, 255)
PALE_GREEN = (152, 251, 152)
INDIGO = (75, 0, 130)
DARK_SEA_GREEN = (143, 188, 143)

# Shape extent (diameter) as a fraction of the image side, small vs big.
SMALL_SPAN = (0.18, 0.26)
BIG_SPAN = (0.30, 0.42)

# Outline width in pixels at a 64-pixel image side; scaled linearly.
THIN_OUTLINE = 1.0
THICK_OUTLINE = 3.0

STRIPES_PER_SHAPE = 3
BANDS_PER_HALF = 4

PLACEMENT_RETRIES = 100

# Vertex counts of the polygonal shapes.
_POLYGON_SIDES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}


def _polygon_vertices(cx: float, cy: float, r: float, theta: float, n: int):
    step = 2.0 * math.pi / n
    return [
        (cx + r * math.cos(theta + i * step), cy + r * math.sin(theta + i * step))
        for i in range(n)
    ]


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, cx: float, cy: float,
                r: float, theta: float, fill, outline, width: int) -> None:
    if kind in _POLYGON_SIDES:
        draw.polygon(_polygon_vertices(cx, cy, r, theta, _POLYGON_SIDES[kind]),
                     fill=fill, outline=outline, width=width)
    elif kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r],
                     fill=fill, outline=outline, width=width)
    elif kind == "wedge":
        # Quarter-disc sector, rotated by theta around its apex.
        deg = math.degrees(theta)
        draw.pieslice([cx - r, cy - r, cx + r, cy + r], start=deg, end=deg + 90.0,
                      fill=fill, outline=outline, width=width)
    else:
        raise ValueError(f"unknown shape kind: {kind}")


def _shape_mask(size: int, kind: str, cx: float, cy: float, r: float,
                theta: float) -> Image.Image:
    mask = Image.new("L", (size, size), 0)
    _draw_shape(ImageDraw.Draw(mask), kind, cx, cy, r, theta, fill=255,
                outline=None, width=0)
    return mask


def _stripe_mask(size: int, cx: float, cy: float, r: float, theta: float,
                 width: int) -> Image.Image:
    """Parallel stripes through the shape center, oriented along theta."""
    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    ux, uy = math.cos(theta), math.sin(theta)      # stripe direction
    nx, ny = -uy, ux                               # normal direction
    half = STRIPES_PER_SHAPE // 2
    for i in range(-half, STRIPES_PER_SHAPE - half):
        off = i * r / (half + 1) if half else 0.0
        ox, oy = cx + off * nx, cy + off * ny
        draw.line([(ox - 2 * r * ux, oy - 2 * r * uy),
                   (ox + 2 * r * ux, oy + 2 * r * uy)],
                  fill=255, width=width)
    return mask


def _draw_background(img: Image.Image, concepts, size: int) -> None:
    if len(concepts) < 9:
        return  # 5-concept datasets keep the solid black background
    draw = ImageDraw.Draw(img)
    half = size // 2
    upper = MAGENTA if concepts[5] else PALE_GREEN
    lower = INDIGO if concepts[6] else DARK_SEA_GREEN
    draw.rectangle([0, 0, size - 1, half - 1], fill=upper)
    draw.rectangle([0, half, size - 1, size - 1], fill=lower)
    band_h = max(1, round(size / 20))
    for present, top in ((concepts[7], 0), (concepts[8], half)):
        if not present:
            continue
        for i in range(BANDS_PER_HALF):
            center = top + (2 * i + 1) * half / (2 * BANDS_PER_HALF)
            y0 = round(center - band_h / 2)
            draw.rectangle([0, y0, size - 1, y0 + band_h - 1], fill=BLACK)


def render_image(class_spec, concepts, sample_seed: int, image_size: int) -> Image.Image:
    """Render one RGB image for ``class_spec`` with the given concepts.

    Deterministic in all arguments. Raises PlacementError if a shape
    cannot be placed fully inside the canvas within the retry budget.
    """
    rng = np.random.default_rng(sample_seed)
    size = image_size
    img = Image.new("RGB", (size, size), BLACK)
    _draw_background(img, concepts, size)

    span_lo, span_hi = BIG_SPAN if concepts[0] else SMALL_SPAN
    outline_base = THICK_OUTLINE if concepts[1] else THIN_OUTLINE
    outline_w = max(1, round(outline_base * size / 64.0))
    facecolor = BLUE if concepts[2] else YELLOW
    outline_color = RED if concepts[3] else WHITE
    striped = bool(concepts[4])

    draw = ImageDraw.Draw(img)
    for kind in (class_spec.shape_a, class_spec.shape_b):
        r = 0.5 * size * rng.uniform(span_lo, span_hi)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        margin = r + outline_w
        for attempt in range(PLACEMENT_RETRIES):
            cx = rng.uniform(0.0, size)
            cy = rng.uniform(0.0, size)
            if margin <= cx <= size - margin and margin <= cy <= size - margin:
                break
        else:
            raise PlacementError(
                f"could not place {kind} (radius {r:.1f}) inside a "
                f"{size}x{size} canvas in {PLACEMENT_RETRIES} tries")
        _draw_shape(draw, kind, cx, cy, r, theta, fill=facecolor,
                    outline=outline_color, width=outline_w)
        if striped:
            clipped = ImageChops.multiply(
                _shape_mask(size, kind, cx, cy, r, theta),
                _stripe_mask(size, cx, cy, r, theta, outline_w))
            img.paste(outline_color, (0, 0), clipped)
    return img
