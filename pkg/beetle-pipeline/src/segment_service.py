import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backends import SegmenterBackend
from .config import SegmentationConfig
from .errors import ConfigurationError, InputError, StageError
from .image_io import resize_labels, resize_rgb
from .models import LabelMask, Taxonomy

logger = logging.getLogger(__name__)

Palette = Dict[int, Tuple[int, int, int]]


def segment_crop(image: np.ndarray, backend: SegmenterBackend, config: SegmentationConfig) -> LabelMask:
    """Segment a beetle crop at model resolution and return labels at crop resolution"""
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise InputError(f"expected a non-empty RGB crop, got shape {image.shape}")
    height, width = image.shape[:2]
    taxonomy = config.get_taxonomy()
    model_width, model_height = config.model_resolution

    model_input = resize_rgb(image, (model_width, model_height))
    try:
        mask = backend.segment(model_input, taxonomy)
    except Exception as e:
        raise StageError(f"segmenter failed: {e}") from e

    if not isinstance(mask, LabelMask) or mask.taxonomy != taxonomy:
        raise StageError(f"segmenter did not return a {taxonomy.name} label mask")
    if (mask.width, mask.height) != (model_width, model_height):
        raise StageError(
            f"segmenter returned {mask.width}x{mask.height}, expected {model_width}x{model_height}"
        )
    return LabelMask(labels=resize_labels(mask.labels, (width, height)), taxonomy=taxonomy)


def _lookup_table(palette: Palette) -> np.ndarray:
    table = np.zeros((256, 3), dtype=np.uint8)
    for class_id, color in palette.items():
        table[class_id] = color
    return table


def colorize_mask(mask: LabelMask, palette: Palette) -> np.ndarray:
    """RGB image with every pixel painted in its class colour"""
    missing = [class_id for class_id in mask.present_ids() if class_id not in palette]
    if missing:
        raise ConfigurationError(f"palette has no color for labels {missing}")
    return _lookup_table(palette)[mask.labels]


def decode_colorized(image: np.ndarray, palette: Palette, taxonomy: Taxonomy) -> LabelMask:
    """Inverse of colorize_mask for an injective palette"""
    labels = np.zeros(image.shape[:2], dtype=np.uint8)
    matched = np.zeros(image.shape[:2], dtype=bool)
    for class_id, color in palette.items():
        hit = np.all(image == np.asarray(color, dtype=np.uint8), axis=-1)
        labels[hit] = class_id
        matched |= hit
    if not matched.all():
        raise InputError(f"{int((~matched).sum())} pixels match no palette color")
    return LabelMask(labels=labels, taxonomy=taxonomy)


def overlay_mask(image: np.ndarray, mask: LabelMask, palette: Palette, alpha: float) -> np.ndarray:
    """Blend part colors over the crop; background pixels are left untouched"""
    if image.shape[:2] != mask.labels.shape:
        raise InputError(f"image {image.shape[:2]} and mask {mask.labels.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must be in [0, 1], got {alpha}")
    colors = colorize_mask(mask, palette).astype(np.float64)
    blended = np.floor((1.0 - alpha) * image.astype(np.float64) + alpha * colors + 0.5)
    foreground = mask.labels != mask.taxonomy.background_id
    overlaid = image.copy()
    overlaid[foreground] = blended[foreground].astype(np.uint8)
    return overlaid


def part_bounds(mask: LabelMask, class_id: int, padding: int = 0) -> Optional[Tuple[int, int, int, int]]:
    """Tight (x0, y0, x1, y1) around one class, padded and clamped; None if absent"""
    if class_id == mask.taxonomy.background_id:
        raise InputError("background is not a morphological part")
    if not 0 <= class_id < mask.taxonomy.num_classes:
        raise InputError(f"class id {class_id} is not in taxonomy {mask.taxonomy.name}")
    ys, xs = np.nonzero(mask.labels == class_id)
    if xs.size == 0:
        return None
    return (
        max(0, int(xs.min()) - padding),
        max(0, int(ys.min()) - padding),
        min(mask.width, int(xs.max()) + 1 + padding),
        min(mask.height, int(ys.max()) + 1 + padding),
    )


def crop_part(image: np.ndarray, mask: LabelMask, class_id: int, padding: int = 0) -> Optional[np.ndarray]:
    """Image region around one class's pixels, or None when the class is absent"""
    if image.shape[:2] != mask.labels.shape:
        raise InputError(f"image {image.shape[:2]} and mask {mask.labels.shape} differ in size")
    bounds = part_bounds(mask, class_id, padding)
    if bounds is None:
        return None
    x0, y0, x1, y1 = bounds
    return image[y0:y1, x0:x1].copy()


def completeness_check(mask: LabelMask, config: SegmentationConfig) -> List[str]:
    """Required parts with no pixels, in taxonomy order; empty means intact"""
    present = set(mask.present_ids())
    return [
        name for class_id, name in mask.taxonomy.classes
        if name in config.required_classes and class_id not in present
    ]
