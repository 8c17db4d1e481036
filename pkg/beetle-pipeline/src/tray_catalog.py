import logging
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from .config import PipelineConfig
from .errors import ConfigurationError, InputError
from .models import MetadataRecord, TrayRecord

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
TRAY_ID_COLUMN = "tray_id"
GROUND_TRUTH_COLUMN = "ground_truth_count"


def discover_trays(input_dir: Path, tray_glob: str = "*") -> List[Path]:
    """Tray images directly under input_dir whose stem matches tray_glob, sorted by name"""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise ConfigurationError(f"input directory does not exist: {input_dir}")
    images = [
        path for path in input_dir.iterdir()
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES and fnmatchcase(path.stem, tray_glob)
    ]
    stems = [path.stem for path in images]
    duplicates = sorted({stem for stem in stems if stems.count(stem) > 1})
    if duplicates:
        raise InputError(f"several images share the tray id(s) {duplicates}")
    return sorted(images, key=lambda path: path.name)


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read CSV {path}: {e}") from e


def _records(frame: pd.DataFrame) -> List[MetadataRecord]:
    return [{column: str(value) for column, value in row.items()} for row in frame.to_dict("records")]


class MetadataSource:
    """Metadata rows per tray from a directory of <tray_id>.csv files or one master CSV"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._master: Optional[pd.DataFrame] = None
        if self.path.is_file():
            master = _read_csv(self.path)
            if TRAY_ID_COLUMN not in master.columns:
                raise InputError(f"master metadata CSV {self.path} has no '{TRAY_ID_COLUMN}' column")
            self._master = master
        elif not self.path.is_dir():
            raise ConfigurationError(f"metadata source does not exist: {self.path}")

    def rows_for(self, tray_id: str) -> Optional[List[MetadataRecord]]:
        """Rows in file order; None when this tray has no metadata at all"""
        if self._master is not None:
            selected = self._master[self._master[TRAY_ID_COLUMN] == tray_id]
            if selected.empty:
                return None
            return _records(selected.drop(columns=[TRAY_ID_COLUMN]))

        per_tray = self.path / f"{tray_id}.csv"
        if not per_tray.is_file():
            return None
        return _records(_read_csv(per_tray))


def load_ground_truth(path: Path) -> Dict[str, int]:
    """tray_id -> expected specimen count"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"ground-truth file not found: {path}")
    frame = _read_csv(path)
    missing = [c for c in (TRAY_ID_COLUMN, GROUND_TRUTH_COLUMN) if c not in frame.columns]
    if missing:
        raise InputError(f"ground-truth file {path} lacks columns {missing}")

    counts: Dict[str, int] = {}
    for tray_id, raw in zip(frame[TRAY_ID_COLUMN], frame[GROUND_TRUTH_COLUMN]):
        if tray_id in counts:
            raise InputError(f"tray {tray_id} appears twice in {path}")
        try:
            value = int(raw)
        except ValueError as e:
            raise InputError(f"tray {tray_id}: ground truth '{raw}' is not an integer") from e
        if value < 0:
            raise InputError(f"tray {tray_id}: negative ground truth {value}")
        counts[tray_id] = value
    return counts


class TrayCatalog:
    """Everything known about the selected trays before any stage runs"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.metadata = MetadataSource(config.metadata_path) if config.metadata_path else None
        self.ground_truth = load_ground_truth(config.ground_truth_path) if config.ground_truth_path else {}

    def trays(self, tray_glob: Optional[str] = None) -> List[TrayRecord]:
        if self.config.input_dir is None:
            raise ConfigurationError("input_dir is not configured")
        records = []
        for image_path in discover_trays(self.config.input_dir, tray_glob or self.config.tray_glob):
            records.append(self.record(image_path.stem, image_path))
        logger.info(f"📂 Found {len(records)} tray images in {self.config.input_dir}")
        return records

    def record(self, tray_id: str, image_path: Path) -> TrayRecord:
        rows = self.metadata.rows_for(tray_id) if self.metadata else None
        ground_truth = self.ground_truth.get(tray_id)
        if rows is not None and ground_truth is not None and ground_truth != len(rows):
            logger.warning(
                f"⚠️ Tray {tray_id}: ground truth {ground_truth} disagrees with {len(rows)} metadata rows, "
                f"ignoring the ground truth"
            )
            ground_truth = None
        return TrayRecord(
            tray_id=tray_id,
            image_path=str(image_path),
            ground_truth_count=ground_truth,
            metadata_rows=rows or [],
            has_metadata=rows is not None,
        )
