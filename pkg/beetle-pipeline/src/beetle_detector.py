import json
import logging
import re
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .backends import DetectorBackend, VerifierBackend
from .config import DetectionConfig
from .errors import InputError, StageError
from .geometry import box_area, box_iou, clamp_box, pixel_bounds
from .models import BBox, Candidate, Detection, Verdict
from .prompts import TrayPrompts

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]


class VerifierAnswer(str, Enum):
    YES = "YES"
    NO = "NO"


class DetectionOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    detections: List[Detection] = []
    iterations_used: int = 0
    verdict: Verdict
    raw_verifier_answer: str
    # Tray image with every retained box painted over; not serialized
    masked_image: Optional[np.ndarray] = Field(default=None, exclude=True)

    @property
    def flagged(self) -> bool:
        return self.verdict != Verdict.VERIFIED_CLEAR

    def reason(self) -> Optional[str]:
        if self.verdict == Verdict.FLAGGED_RESIDUAL:
            return f"verifier still sees beetles, check manually: {self.raw_verifier_answer!r}"
        if self.verdict == Verdict.FLAGGED_UNPARSEABLE:
            return f"verifier answer has no final YES/NO, check manually: {self.raw_verifier_answer!r}"
        if self.verdict == Verdict.FLAGGED_MAX_ITERATIONS:
            return f"detection stopped at the iteration limit after {self.iterations_used} rounds"
        return None


def apply_white_masks(image: np.ndarray, boxes: Sequence[BBox], fill: Color = (255, 255, 255)) -> np.ndarray:
    """Return a copy of image with the full rectangle of every box set to fill"""
    height, width = image.shape[:2]
    masked = image.copy()
    for box in boxes:
        if not box.within(width, height):
            raise InputError(f"box {box.as_tuple()} lies outside the {width}x{height} image")
        x0, y0, x1, y1 = pixel_bounds(box, width, height)
        masked[y0:y1, x0:x1] = fill
    return masked


def filter_candidates(candidates: Sequence[Candidate], config: DetectionConfig, iteration: int = 0) -> List[Detection]:
    """Keep candidates meeting both thresholds (inclusive), in order"""
    kept = []
    for candidate in candidates:
        if candidate.box_score >= config.box_threshold and candidate.text_score >= config.text_threshold:
            try:
                box = BBox(x_min=candidate.x_min, y_min=candidate.y_min,
                           x_max=candidate.x_max, y_max=candidate.y_max)
            except ValueError as e:
                raise InputError(f"invalid candidate box: {e}") from e
            kept.append(Detection(box=box, box_score=candidate.box_score,
                                  text_score=candidate.text_score, iteration=iteration))
    return kept


def dedup_against(existing: Sequence[Detection], new: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Drop new detections overlapping any earlier detection by more than iou_threshold"""
    return [
        detection for detection in new
        if all(box_iou(detection.box, seen.box) <= iou_threshold for seen in existing)
    ]


def parse_verdict(answer: str) -> Optional[VerifierAnswer]:
    """Final alphabetic token, case-folded; None when it is neither YES nor NO"""
    tokens = re.findall(r"[A-Za-z]+", answer or "")
    if not tokens:
        return None
    final = tokens[-1].upper()
    if final == "YES":
        return VerifierAnswer.YES
    if final == "NO":
        return VerifierAnswer.NO
    return None


def _clamp_candidates(candidates: Sequence[Candidate], width: int, height: int) -> List[Candidate]:
    clamped = []
    for candidate in candidates:
        box = clamp_box(candidate.x_min, candidate.y_min, candidate.x_max, candidate.y_max, width, height)
        if box is None:
            continue
        clamped.append(candidate.model_copy(update=box.model_dump()))
    return clamped


def run_iterative_detection(
    image: np.ndarray,
    detector: DetectorBackend,
    verifier: VerifierBackend,
    config: DetectionConfig,
    progress_callback: Optional[Callable[[str], None]] = None,
) -> DetectionOutcome:
    """Detect, mask found beetles white, and redetect until a round finds nothing.

    The final masked image goes to the verifier; its last word decides whether
    the tray is clear or needs a manual check.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise InputError(f"expected an RGB image, got shape {image.shape}")
    height, width = image.shape[:2]

    current = image.copy()
    accumulated: List[Detection] = []
    iterations_used = 0
    hit_limit = True

    for iteration in range(config.max_iterations):
        iterations_used = iteration + 1
        try:
            raw = detector.detect(current, config.text_prompt)
        except Exception as e:
            raise StageError(f"detector failed in round {iterations_used}: {e}") from e

        kept = filter_candidates(_clamp_candidates(raw, width, height), config, iteration)
        new = dedup_against(accumulated, kept, config.dedup_iou_threshold)
        logger.debug(f"Round {iterations_used}: {len(raw)} candidates, {len(kept)} above thresholds, {len(new)} new")
        if progress_callback:
            progress_callback(f"🔍 Round {iterations_used}: {len(new)} new beetles")

        if not new:
            hit_limit = False
            break
        accumulated.extend(new)
        current = apply_white_masks(current, [d.box for d in new], config.mask_fill)

    question = TrayPrompts.verify_user(config.verify_prompt)
    try:
        raw_answer = verifier.answer(current, question)
    except Exception as e:
        raise StageError(f"verifier failed: {e}") from e
    if not raw_answer or not raw_answer.strip():
        raise StageError("verifier returned an empty answer")

    parsed = parse_verdict(raw_answer)
    if hit_limit:
        verdict = Verdict.FLAGGED_MAX_ITERATIONS
    elif parsed is None:
        verdict = Verdict.FLAGGED_UNPARSEABLE
    elif parsed == VerifierAnswer.YES:
        verdict = Verdict.FLAGGED_RESIDUAL
    else:
        verdict = Verdict.VERIFIED_CLEAR

    return DetectionOutcome(
        detections=accumulated,
        iterations_used=iterations_used,
        verdict=verdict,
        raw_verifier_answer=raw_answer,
        masked_image=current,
    )


def save_detection_output(tray_id: str, outcome: DetectionOutcome, path: Path) -> Path:
    """Per-tray detection JSON: boxes, scores, iteration and area plus the verdict"""
    payload = {
        "tray_id": tray_id,
        "iterations_used": outcome.iterations_used,
        "verdict": outcome.verdict.value,
        "raw_verifier_answer": outcome.raw_verifier_answer,
        "detections": [
            {
                **detection.box.model_dump(),
                "box_score": detection.box_score,
                "text_score": detection.text_score,
                "iteration": detection.iteration,
                "area": box_area(detection.box),
            }
            for detection in outcome.detections
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
