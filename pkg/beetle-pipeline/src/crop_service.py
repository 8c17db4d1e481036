import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import SortConfig
from .errors import InputError, MetadataMismatch
from .geometry import pixel_bounds
from .models import BBox, Detection, MetadataRecord, TrayRecord

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["tray_id", "crop_index", "crop_filename", "x_min", "y_min", "x_max", "y_max", "box_score"]
MISSING_PARTS_COLUMN = "missing_parts"


def crop_filename(tray_id: str, index: int) -> str:
    """Zero-padded so lexicographic file order equals reading order"""
    return f"{tray_id}_{index:03d}.png"


def sort_reading_order(boxes: Sequence[BBox], config: SortConfig) -> List[int]:
    """Permutation putting boxes in left-to-right, top-to-bottom tray order.

    Rows are built by a sweep over top edges: a box joins the current row when
    its y_min is within row_tolerance_factor x median box height of the row's
    first member, otherwise it opens a new row.
    """
    if not boxes:
        return []
    tolerance = config.row_tolerance_factor * float(np.median([box.height for box in boxes]))

    rows: List[Tuple[float, List[int]]] = []
    for index in sorted(range(len(boxes)), key=lambda i: (boxes[i].y_min, i)):
        if rows and abs(boxes[index].y_min - rows[-1][0]) <= tolerance:
            rows[-1][1].append(index)
        else:
            rows.append((boxes[index].y_min, [index]))

    ordering = []
    for _, members in rows:
        ordering.extend(sorted(members, key=lambda i: (boxes[i].x_min, boxes[i].y_min, i)))
    return ordering


def crop_boxes(image: np.ndarray, boxes: Sequence[BBox], ordering: Sequence[int], padding: int = 0) -> List[np.ndarray]:
    """One crop per box in ordering sequence: outward-rounded, padded, clamped"""
    if sorted(ordering) != list(range(len(boxes))):
        raise InputError(f"ordering {list(ordering)} is not a permutation of {len(boxes)} boxes")
    if padding < 0:
        raise InputError(f"padding must be non-negative, got {padding}")
    height, width = image.shape[:2]
    crops = []
    for index in ordering:
        box = boxes[index]
        if not box.within(width, height):
            raise InputError(f"box {box.as_tuple()} lies outside the {width}x{height} image")
        x0, y0, x1, y1 = pixel_bounds(box, width, height, padding)
        crops.append(image[y0:y1, x0:x1].copy())
    return crops


def match_metadata(ordered_count: int, tray: TrayRecord) -> List[Tuple[int, MetadataRecord]]:
    """Positional join of reading-order crops with metadata rows"""
    if ordered_count != len(tray.metadata_rows):
        raise MetadataMismatch(ordered_count, len(tray.metadata_rows))
    return list(enumerate(tray.metadata_rows))


def write_tray_csv(
    tray_id: str,
    matches: Sequence[Tuple[int, MetadataRecord]],
    detections: Sequence[Detection],
    out_path: Path,
) -> Path:
    """Write the per-tray CSV; detections are already in reading order"""
    metadata_columns: List[str] = list(matches[0][1].keys()) if matches else []
    clashes = [column for column in metadata_columns if column in BASE_COLUMNS or column == MISSING_PARTS_COLUMN]
    if clashes:
        raise InputError(f"metadata columns {clashes} clash with generated CSV columns")
    by_index: Dict[int, MetadataRecord] = dict(matches)

    rows = []
    for index, detection in enumerate(detections):
        row = {
            "tray_id": tray_id,
            "crop_index": index,
            "crop_filename": crop_filename(tray_id, index),
            "x_min": detection.box.x_min,
            "y_min": detection.box.y_min,
            "x_max": detection.box.x_max,
            "y_max": detection.box.y_max,
            "box_score": detection.box_score,
        }
        row.update(by_index.get(index, {}))
        rows.append(row)

    frame = pd.DataFrame(rows, columns=BASE_COLUMNS + metadata_columns)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, index=False, lineterminator="\n")
    return out_path


def read_tray_csv(path: Path) -> pd.DataFrame:
    """Read a tray CSV back with every value kept as text"""
    return pd.read_csv(path, dtype=str, keep_default_na=False)


def append_missing_parts(csv_path: Path, missing: Dict[str, List[str]]) -> Path:
    """Add (or replace) the semicolon-joined missing_parts column, keyed by crop filename"""
    frame = read_tray_csv(csv_path)
    frame[MISSING_PARTS_COLUMN] = [";".join(missing.get(name, [])) for name in frame["crop_filename"]]
    frame.to_csv(csv_path, index=False, lineterminator="\n")
    return Path(csv_path)
