import math
from typing import Optional, Tuple

from .models import BBox


def box_area(b: BBox) -> float:
    """Area in square pixels"""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes, 0.0 when disjoint"""
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = box_area(a) + box_area(b) - intersection
    return min(1.0, intersection / union)


def pixel_bounds(b: BBox, width: int, height: int, padding: int = 0) -> Tuple[int, int, int, int]:
    """Integer (x0, y0, x1, y1) slice bounds: outward rounding, padding, then clamping.

    Mins are floored and maxes ceiled so no detected pixel is lost.
    """
    x0 = max(0, math.floor(b.x_min) - padding)
    y0 = max(0, math.floor(b.y_min) - padding)
    x1 = min(width, math.ceil(b.x_max) + padding)
    y1 = min(height, math.ceil(b.y_max) + padding)
    return x0, y0, x1, y1


def clamp_box(x_min: float, y_min: float, x_max: float, y_max: float,
              width: int, height: int) -> Optional[BBox]:
    """Clip raw coordinates to the image; None when nothing of the box is left"""
    if not all(math.isfinite(float(v)) for v in (x_min, y_min, x_max, y_max)):
        return None
    x_min, x_max = max(0.0, float(x_min)), min(float(width), float(x_max))
    y_min, y_max = max(0.0, float(y_min)), min(float(height), float(y_max))
    if x_min >= x_max or y_min >= y_max:
        return None
    return BBox(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)
