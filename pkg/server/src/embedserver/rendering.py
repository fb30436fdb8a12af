"""Region renderings: crop and per-box blur isolation.

crop: tight crop of the single box, or of the union rectangle for a
two-box relation request. blur: the full image Gaussian-blurred with each
requested box's interior pasted back sharp — for two-box requests both
interiors separately, so the corridor between them stays blurred.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

from PIL import Image, ImageFilter


class InvalidRegionError(ValueError):
    """Raised for malformed or out-of-bounds region requests."""


def _pixel_box(box: Sequence[float], width: int, height: int) -> Tuple[int, int, int, int]:
    if len(box) != 4:
        raise InvalidRegionError(f"box needs 4 coordinates: {box!r}")
    x0, y0, x1, y1 = (float(c) for c in box)
    if not (x1 > x0 and y1 > y0):
        raise InvalidRegionError(f"inverted or empty box: {box!r}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise InvalidRegionError(f"box {box!r} outside {width}x{height} image")
    # round outward so thin boxes keep at least one pixel
    left, top = int(x0), int(y0)
    right, bottom = min(width, max(left + 1, round(x1))), min(height, max(top + 1, round(y1)))
    return left, top, right, bottom


def union_rect(boxes: Sequence[Sequence[float]]) -> List[float]:
    return [
        min(float(b[0]) for b in boxes),
        min(float(b[1]) for b in boxes),
        max(float(b[2]) for b in boxes),
        max(float(b[3]) for b in boxes),
    ]


def render_region(
    image: Image.Image,
    boxes: Sequence[Sequence[float]],
    render: str,
    blur_radius: float = 10.0,
) -> Image.Image:
    """Pixel rendering for one region request (one or two boxes)."""
    if len(boxes) not in (1, 2):
        raise InvalidRegionError("a region request carries one or two boxes")
    width, height = image.size
    pixel_boxes = [_pixel_box(box, width, height) for box in boxes]
    if render == "crop":
        target = boxes[0] if len(boxes) == 1 else union_rect(boxes)
        return image.crop(_pixel_box(target, width, height))
    if render == "blur":
        out = image.filter(ImageFilter.GaussianBlur(radius=blur_radius))
        for pixel_box in pixel_boxes:
            out.paste(image.crop(pixel_box), pixel_box)
        return out
    raise InvalidRegionError(f"unknown render mode: {render!r}")
