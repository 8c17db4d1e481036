import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing_extensions import Annotated

from .errors import ConfigurationError
from .models import Taxonomy

logger = logging.getLogger(__name__)

Channel = Annotated[int, Field(ge=0, le=255)]
RGB = Tuple[Channel, Channel, Channel]

# Fixed, injective palette; part of the documented mask/overlay output format
DEFAULT_PALETTE: Dict[str, Tuple[int, int, int]] = {
    "background": (0, 0, 0),
    "head": (230, 25, 75),
    "pronotum": (60, 180, 75),
    "elytra": (0, 130, 200),
    "legs": (245, 130, 48),
    "antennas": (145, 30, 180),
    "eyes": (255, 225, 25),
    "mouthparts": (70, 240, 240),
    "tail": (240, 50, 230),
    "pin": (128, 128, 128),
}

BACKEND_NAMES = {
    "detector": {"scripted", "reference-detector"},
    "verifier": {"scripted", "reference-verifier", "chat-verifier"},
    "segmenter": {"scripted", "reference-segmenter"},
}

DEFAULT_CHECKPOINTS = {
    "reference-detector": "IDEA-Research/grounding-dino-base",
    "reference-verifier": "llava-hf/llava-v1.6-mistral-7b-hf",
    "reference-segmenter": "facebook/mask2former-swin-large-ade-semantic",
    "chat-verifier": "claude-3-5-sonnet-20241022",
}


class DetectionConfig(BaseModel):
    text_prompt: str = "a beetle."
    box_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    text_threshold: float = Field(default=0.2, ge=0.0, le=1.0)
    max_iterations: int = Field(default=20, ge=1)
    dedup_iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    mask_fill: RGB = (255, 255, 255)
    verify_prompt: str = "Do you see beetles in this image?"


class SortConfig(BaseModel):
    enabled: bool = True
    row_tolerance_factor: float = Field(default=0.5, gt=0.0)
    crop_padding: int = Field(default=0, ge=0)


class SegmentationConfig(BaseModel):
    taxonomy: str = "beetle5"
    model_resolution: Tuple[int, int] = (512, 512)  # (width, height)
    overlay_alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    palette: Dict[str, RGB] = {}
    required_classes: List[str] = ["head", "pronotum", "elytra"]
    save_part_crops: bool = False
    part_padding: int = Field(default=0, ge=0)

    @field_validator("model_resolution")
    @classmethod
    def positive_resolution(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if min(value) < 1:
            raise ValueError(f"model resolution must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def check_taxonomy(self) -> "SegmentationConfig":
        taxonomy = Taxonomy.from_name(self.taxonomy)
        names = taxonomy.class_names
        unknown = [name for name in self.required_classes if name not in names]
        if unknown:
            raise ValueError(f"required classes {unknown} are not in taxonomy {self.taxonomy}")
        if "background" in self.required_classes:
            raise ValueError("background cannot be a required part")

        palette = {name: DEFAULT_PALETTE[name] for name in names}
        palette.update({name: tuple(color) for name, color in self.palette.items()})
        extra = sorted(set(palette) - set(names))
        if extra:
            raise ValueError(f"palette names classes outside taxonomy {self.taxonomy}: {extra}")
        if palette["background"] != (0, 0, 0):
            raise ValueError("background must map to (0, 0, 0)")
        if len(set(palette.values())) != len(palette):
            raise ValueError("palette colors must be distinct")
        self.palette = palette
        return self

    def get_taxonomy(self) -> Taxonomy:
        return Taxonomy.from_name(self.taxonomy)

    def palette_by_id(self) -> Dict[int, Tuple[int, int, int]]:
        taxonomy = self.get_taxonomy()
        return {class_id: tuple(self.palette[name]) for class_id, name in taxonomy.classes}


class BackendSelection(BaseModel):
    name: str = "scripted"
    fixture_dir: Optional[Path] = None
    checkpoint: Optional[str] = None
    device: str = "cpu"

    def resolved_checkpoint(self) -> str:
        return self.checkpoint or DEFAULT_CHECKPOINTS[self.name]


class PipelineConfig(BaseSettings):
    """Effective configuration: YAML file, then BEETLE_* environment, then defaults"""
    model_config = SettingsConfigDict(env_prefix="BEETLE_", env_nested_delimiter="__", extra="forbid")

    input_dir: Optional[Path] = None
    tray_glob: str = "*"
    metadata_path: Optional[Path] = None
    ground_truth_path: Optional[Path] = None
    output_dir: Path = Path("output")
    fixture_root: Optional[Path] = None
    workers: int = Field(default=1, ge=1)

    detector: BackendSelection = BackendSelection()
    verifier: BackendSelection = BackendSelection()
    segmenter: BackendSelection = BackendSelection()

    detection: DetectionConfig = DetectionConfig()
    sort: SortConfig = SortConfig()
    segmentation: SegmentationConfig = SegmentationConfig()

    @model_validator(mode="after")
    def check_backends(self) -> "PipelineConfig":
        for role, known in BACKEND_NAMES.items():
            selection = getattr(self, role)
            if selection.name not in known:
                raise ValueError(f"unknown {role} backend '{selection.name}', expected one of {sorted(known)}")
        return self

    def fixture_dir_for(self, role: str) -> Path:
        selection: BackendSelection = getattr(self, role)
        fixture_dir = selection.fixture_dir or self.fixture_root
        if fixture_dir is None:
            raise ConfigurationError(
                f"scripted {role} needs {role}.fixture_dir or the BEETLE_FIXTURE_ROOT environment variable"
            )
        return Path(fixture_dir)

    def run_id(self) -> str:
        """Digest of the settings that shape outputs; stable across machines and reruns"""
        payload = "|".join([
            self.detector.name, self.verifier.name, self.segmenter.name,
            self.detection.model_dump_json(), self.sort.model_dump_json(),
            self.segmentation.model_dump_json(),
        ])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    def check_paths(self) -> None:
        for label, path in (
            ("input_dir", self.input_dir),
            ("metadata_path", self.metadata_path),
            ("ground_truth_path", self.ground_truth_path),
        ):
            if path is not None and not Path(path).exists():
                raise ConfigurationError(f"{label} does not exist: {path}")
        for role in BACKEND_NAMES:
            if getattr(self, role).name == "scripted":
                fixture_dir = self.fixture_dir_for(role)
                if not fixture_dir.is_dir():
                    raise ConfigurationError(f"{role} fixture directory does not exist: {fixture_dir}")


_FILE_PATH_KEYS = ("input_dir", "metadata_path", "ground_truth_path", "output_dir", "fixture_root")


def _resolve_file_paths(data: Dict[str, Any], base: Path) -> Dict[str, Any]:
    """Relative paths written in a config file are relative to that file"""
    resolved = dict(data)
    for key in _FILE_PATH_KEYS:
        if resolved.get(key) is not None:
            resolved[key] = str(base / Path(resolved[key]).expanduser())
    for role in BACKEND_NAMES:
        section = resolved.get(role)
        if isinstance(section, dict) and section.get("fixture_dir") is not None:
            section = dict(section)
            section["fixture_dir"] = str(base / Path(section["fixture_dir"]).expanduser())
            resolved[role] = section
    return resolved


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None,
                check_paths: bool = True) -> PipelineConfig:
    """Load the YAML config file (if any), apply CLI overrides and validate"""
    data: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path} must contain a mapping at the top level")
        data = _resolve_file_paths(loaded, path.parent)
        logger.debug(f"Loaded config file {path}")

    cli_values = {key: value for key, value in (overrides or {}).items() if value is not None}
    data = _merge(data, cli_values)

    try:
        config = PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
    except ConfigurationError:
        raise

    if check_paths:
        config.check_paths()
    return config
