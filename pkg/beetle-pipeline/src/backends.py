"""
Backend contracts for the three external models and their scripted stand-ins.

The pipeline only talks to these contracts. Scripted backends replay canned
responses from fixture files so every run of the hermetic suite is reproducible;
checkpoint-backed adapters live in reference_backends and are imported lazily.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from pydantic import TypeAdapter, ValidationError

from .config import PipelineConfig
from .errors import BackendError, ConfigurationError
from .image_io import load_label_mask
from .models import Candidate, LabelMask, Taxonomy

logger = logging.getLogger(__name__)


class DetectorBackend(ABC):
    """(image, text prompt) -> raw, unfiltered candidates"""

    name = "detector"

    @abstractmethod
    def detect(self, image: np.ndarray, text_prompt: str) -> List[Candidate]:
        pass

    def __str__(self) -> str:
        return f"{self.__class__.__name__}({self.name})"


class VerifierBackend(ABC):
    """(image, question) -> free-form, non-empty answer"""

    name = "verifier"

    @abstractmethod
    def answer(self, image: np.ndarray, question: str) -> str:
        pass

    def __str__(self) -> str:
        return f"{self.__class__.__name__}({self.name})"


class SegmenterBackend(ABC):
    """(image at model resolution, taxonomy) -> LabelMask of the same resolution"""

    name = "segmenter"

    @abstractmethod
    def segment(self, image: np.ndarray, taxonomy: Taxonomy) -> LabelMask:
        pass

    def __str__(self) -> str:
        return f"{self.__class__.__name__}({self.name})"


_ROUNDS = TypeAdapter(List[List[Candidate]])
_ANSWERS = TypeAdapter(List[str])


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read fixture {path}: {e}") from e


class ScriptedDetector(DetectorBackend):
    """Call k returns scripted round k; calls past the script return no candidates"""

    name = "scripted"

    def __init__(self, rounds: List[List[Candidate]]):
        self.rounds = rounds
        self.calls = 0

    def detect(self, image: np.ndarray, text_prompt: str) -> List[Candidate]:
        index = self.calls
        self.calls += 1
        if index < len(self.rounds):
            return list(self.rounds[index])
        return []


class ScriptedVerifier(VerifierBackend):
    """Replays answers in order; repeats the last answer once exhausted"""

    name = "scripted"

    def __init__(self, answers: List[str]):
        self.answers = answers
        self.calls = 0

    def answer(self, image: np.ndarray, question: str) -> str:
        index = min(self.calls, len(self.answers) - 1)
        self.calls += 1
        return self.answers[index]


class ScriptedSegmenter(SegmenterBackend):
    """Replays fixture masks in order; repeats the last mask once exhausted"""

    name = "scripted"

    def __init__(self, masks: List[LabelMask]):
        self.masks = masks
        self.calls = 0

    def segment(self, image: np.ndarray, taxonomy: Taxonomy) -> LabelMask:
        mask = self.masks[min(self.calls, len(self.masks) - 1)]
        self.calls += 1
        if mask.taxonomy != taxonomy:
            raise BackendError(
                f"scripted mask is bound to {mask.taxonomy.name}, segmentation asked for {taxonomy.name}"
            )
        return mask


def scripted_detector(fixture: Union[str, Path, Sequence]) -> ScriptedDetector:
    """Build a detector from a JSON fixture path or an already parsed list of rounds"""
    raw = _read_json(Path(fixture)) if isinstance(fixture, (str, Path)) else fixture
    try:
        rounds = _ROUNDS.validate_python(raw)
    except ValidationError as e:
        raise ConfigurationError(f"malformed detector fixture: {e}") from e
    return ScriptedDetector(rounds)


def scripted_verifier(fixture: Union[str, Path, Sequence[str]]) -> ScriptedVerifier:
    raw = _read_json(Path(fixture)) if isinstance(fixture, (str, Path)) else fixture
    try:
        answers = _ANSWERS.validate_python(raw)
    except ValidationError as e:
        raise ConfigurationError(f"malformed verifier fixture: {e}") from e
    if not answers or not all(answer.strip() for answer in answers):
        raise ConfigurationError("verifier fixture needs at least one non-empty answer")
    return ScriptedVerifier(answers)


def scripted_segmenter(fixture: Sequence[Union[str, Path, LabelMask]], taxonomy: Taxonomy) -> ScriptedSegmenter:
    """Build a segmenter from palette mask files (or masks) that must fit the taxonomy"""
    masks: List[LabelMask] = []
    for item in fixture:
        if isinstance(item, LabelMask):
            if item.taxonomy != taxonomy:
                raise ConfigurationError(f"fixture mask is bound to {item.taxonomy.name}, not {taxonomy.name}")
            masks.append(item)
        else:
            masks.append(load_label_mask(item, taxonomy))
    if not masks:
        raise ConfigurationError("segmenter fixture needs at least one mask")
    return ScriptedSegmenter(masks)


class BackendFactory:
    """Creates fresh backend instances per tray; instances are single-consumer"""

    def __init__(self, config: PipelineConfig):
        self.config = config

    def _fixture_path(self, role: str, tray_id: str, filename: str) -> Path:
        fixture_dir = self.config.fixture_dir_for(role)
        for candidate in (fixture_dir / tray_id / filename, fixture_dir / filename):
            if candidate.exists():
                return candidate
        raise ConfigurationError(f"no {role} fixture '{filename}' for tray {tray_id} under {fixture_dir}")

    def detector(self, tray_id: str) -> DetectorBackend:
        selection = self.config.detector
        if selection.name == "scripted":
            return scripted_detector(self._fixture_path("detector", tray_id, "detector.json"))
        from .reference_backends import GroundingDinoDetector
        return GroundingDinoDetector(selection.resolved_checkpoint(), device=selection.device)

    def verifier(self, tray_id: str) -> VerifierBackend:
        selection = self.config.verifier
        if selection.name == "scripted":
            return scripted_verifier(self._fixture_path("verifier", tray_id, "verifier.json"))
        if selection.name == "chat-verifier":
            from .reference_backends import ChatModelVerifier
            return ChatModelVerifier(selection.resolved_checkpoint())
        from .reference_backends import LlavaNextVerifier
        return LlavaNextVerifier(selection.resolved_checkpoint(), device=selection.device)

    def segmenter(self, tray_id: str) -> SegmenterBackend:
        selection = self.config.segmenter
        taxonomy = self.config.segmentation.get_taxonomy()
        if selection.name == "scripted":
            mask_dir = self._fixture_path("segmenter", tray_id, "masks")
            mask_files = sorted(mask_dir.glob("*.png"))
            return scripted_segmenter(mask_files, taxonomy)
        from .reference_backends import Mask2FormerSegmenter
        return Mask2FormerSegmenter(selection.resolved_checkpoint(), device=selection.device)
