from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError


class BBox(BaseModel):
    """Axis-aligned pixel rectangle, origin at the top-left, y pointing down"""
    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def check_extent(self) -> "BBox":
        if min(self.x_min, self.y_min) < 0:
            raise ValueError(f"negative coordinate in {self.as_tuple()}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box has no area: {self.as_tuple()}")
        return self

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def within(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height


class Detection(BaseModel):
    """A retained detector candidate and the loop iteration that found it"""
    model_config = ConfigDict(frozen=True)

    box: BBox
    box_score: float = Field(ge=0.0, le=1.0)
    text_score: float = Field(ge=0.0, le=1.0)
    iteration: int = Field(default=0, ge=0)


class Candidate(BaseModel):
    """Raw, unfiltered detector output in corner format"""
    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    box_score: float = Field(ge=0.0, le=1.0)
    text_score: float = Field(ge=0.0, le=1.0)


# Class lists are fixed; background is always id 0
TAXONOMY_CLASSES: Dict[str, List[str]] = {
    "beetle5": ["background", "head", "pronotum", "elytra", "legs", "antennas"],
    "beetle9": [
        "background", "head", "pronotum", "elytra", "legs", "antennas",
        "eyes", "mouthparts", "tail", "pin",
    ],
}


class Taxonomy(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    classes: List[Tuple[int, str]]
    background_id: int = 0

    @classmethod
    def from_name(cls, name: str) -> "Taxonomy":
        if name not in TAXONOMY_CLASSES:
            raise ConfigurationError(
                f"unknown taxonomy '{name}', expected one of {sorted(TAXONOMY_CLASSES)}"
            )
        return cls(name=name, classes=list(enumerate(TAXONOMY_CLASSES[name])))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> List[str]:
        return [class_name for _, class_name in self.classes]

    @property
    def foreground_ids(self) -> List[int]:
        return [class_id for class_id, _ in self.classes if class_id != self.background_id]

    def class_id(self, class_name: str) -> int:
        """Id of a class name; ConfigurationError when the taxonomy lacks it"""
        for class_id, known in self.classes:
            if known == class_name:
                return class_id
        raise ConfigurationError(f"class '{class_name}' is not part of taxonomy {self.name}")

    def class_name(self, class_id: int) -> str:
        """Name of a class id"""
        return self.classes[class_id][1]


@dataclass(frozen=True)
class LabelMask:
    """Row-major grid of class ids bound to a taxonomy"""
    labels: np.ndarray
    taxonomy: Taxonomy

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"label mask must be 2-D, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"label mask must hold integers, got {labels.dtype}")
        if labels.size:
            low, high = int(labels.min()), int(labels.max())
            bad = low if low < 0 else high
            if low < 0 or high >= self.taxonomy.num_classes:
                raise ValueError(f"label {bad} is not a class of taxonomy {self.taxonomy.name}")
        labels = labels.astype(np.uint8, copy=True)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    def present_ids(self) -> List[int]:
        return [int(v) for v in np.unique(self.labels)]


# Schema-free metadata row; columns are carried through verbatim and in order
MetadataRecord = Dict[str, str]


class TrayRecord(BaseModel):
    tray_id: str
    image_path: str
    ground_truth_count: Optional[int] = Field(default=None, ge=0)
    metadata_rows: List[MetadataRecord] = []
    # False when no metadata source covers this tray; the CSV is then geometry-only
    has_metadata: bool = False

    @model_validator(mode="after")
    def check_rows(self) -> "TrayRecord":
        if self.metadata_rows:
            keys = list(self.metadata_rows[0].keys())
            for row in self.metadata_rows[1:]:
                if list(row.keys()) != keys:
                    raise ValueError(f"metadata rows of tray {self.tray_id} disagree on columns")
            if self.ground_truth_count is not None and self.ground_truth_count != len(self.metadata_rows):
                raise ValueError(
                    f"tray {self.tray_id}: ground truth says {self.ground_truth_count} beetles "
                    f"but metadata has {len(self.metadata_rows)} rows"
                )
        return self


class StageStatus(str, Enum):
    PENDING = "pending"
    DONE = "done"
    FLAGGED = "flagged"
    FAILED = "failed"


class Verdict(str, Enum):
    VERIFIED_CLEAR = "VERIFIED_CLEAR"
    FLAGGED_RESIDUAL = "FLAGGED_RESIDUAL"
    FLAGGED_UNPARSEABLE = "FLAGGED_UNPARSEABLE"
    FLAGGED_MAX_ITERATIONS = "FLAGGED_MAX_ITERATIONS"


class StageRecord(BaseModel):
    status: StageStatus = StageStatus.PENDING
    reason: Optional[str] = None

    @model_validator(mode="after")
    def check_reason(self) -> "StageRecord":
        if self.status in (StageStatus.FLAGGED, StageStatus.FAILED) and not (self.reason or "").strip():
            raise ValueError(f"a {self.status.value} stage needs a reason")
        return self

    @property
    def completed(self) -> bool:
        """Flagged stages count as completed; flags are advisory"""
        return self.status in (StageStatus.DONE, StageStatus.FLAGGED)


class TrayEntry(BaseModel):
    """Per-tray manifest record; paths are relative to the output root"""
    tray_id: str
    image_path: str
    detect: StageRecord = StageRecord()
    crop: StageRecord = StageRecord()
    segment: StageRecord = StageRecord()
    # Stage 1
    detections: List[Detection] = []
    iterations_used: Optional[int] = None
    detection_path: Optional[str] = None
    verdict: Optional[Verdict] = None
    raw_verifier_answer: Optional[str] = None
    # Stage 2
    crop_paths: List[str] = []
    csv_path: Optional[str] = None
    # Stage 3
    mask_paths: List[str] = []
    overlay_paths: List[str] = []
    part_crop_paths: List[str] = []
    missing_parts: Dict[str, List[str]] = {}

    @model_validator(mode="after")
    def check_stage_order(self) -> "TrayEntry":
        if (self.crop_paths or self.csv_path) and not self.detect.completed:
            raise ValueError(f"tray {self.tray_id} has crops but detection is {self.detect.status.value}")
        if (self.mask_paths or self.overlay_paths) and not self.crop.completed:
            raise ValueError(f"tray {self.tray_id} has masks but cropping is {self.crop.status.value}")
        return self

    def stage(self, name: str) -> StageRecord:
        return getattr(self, name)


class RunManifest(BaseModel):
    run_id: str
    trays: Dict[str, TrayEntry] = {}
