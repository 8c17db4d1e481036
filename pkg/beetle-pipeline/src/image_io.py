import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError
from .models import LabelMask, Taxonomy

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_rgb(path: PathLike) -> np.ndarray:
    """Decode an image file into an (H, W, 3) uint8 array"""
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read image {path}: {e}") from e


def save_rgb(image: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def resize_rgb(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (width, height); aspect ratio is not preserved"""
    resized = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).resize(size, resample=Image.Resampling.BILINEAR)
    return np.array(resized, dtype=np.uint8)


def resize_labels(labels: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label grid to (width, height); never invents labels"""
    resized = Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8)).resize(size, resample=Image.Resampling.NEAREST)
    return np.array(resized, dtype=np.uint8)


def _flat_palette(palette: Dict[int, Tuple[int, int, int]]) -> list:
    flat = [0] * (256 * 3)
    for class_id, color in palette.items():
        flat[class_id * 3:class_id * 3 + 3] = list(color)
    return flat


def save_label_mask(mask: LabelMask, palette: Dict[int, Tuple[int, int, int]], path: PathLike) -> Path:
    """Write an indexed-palette PNG whose palette index is the class id"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.ascontiguousarray(mask.labels, dtype=np.uint8))
    img.putpalette(_flat_palette(palette))
    img.save(path, format="PNG")
    return path


def load_label_mask(path: PathLike, taxonomy: Taxonomy) -> LabelMask:
    """Read a palette PNG back into class ids, bit-exact"""
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                raise ConfigurationError(f"mask {path} is {img.mode}, expected an indexed-palette image")
            labels = np.array(img, dtype=np.uint8)
    except OSError as e:
        raise ConfigurationError(f"cannot read mask {path}: {e}") from e
    try:
        return LabelMask(labels=labels, taxonomy=taxonomy)
    except ValueError as e:
        raise ConfigurationError(f"mask {path} does not fit taxonomy {taxonomy.name}: {e}") from e
