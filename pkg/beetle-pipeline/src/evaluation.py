"""
Evaluation harness: exact-match count accuracy for detection and per-class
IoU / mIoU for segmentation.

Conventions: background never enters the mean, and a class absent from both
prediction and ground truth is not applicable (excluded from the per-image mean)
unless include_absent is set, in which case it counts as 1.0.
"""

import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel
from tabulate import tabulate

from .errors import InputError
from .image_io import load_label_mask, load_rgb, resize_rgb, save_rgb
from .models import LabelMask, Taxonomy
from .segment_service import colorize_mask

logger = logging.getLogger(__name__)


class TrayCount(BaseModel):
    tray_id: str
    detected: int
    ground_truth: int
    delta: int


class CountReport(BaseModel):
    total_trays: int
    exact_matches: int
    over_count_trays: int
    under_count_trays: int
    accuracy: float
    per_tray: List[TrayCount] = []

    def accuracy_fraction(self) -> Fraction:
        return Fraction(self.exact_matches, self.total_trays)


class ImageScore(BaseModel):
    name: str
    per_class: Dict[str, Optional[float]]
    miou: Optional[float] = None
    pixel_accuracy: float


class SegReport(BaseModel):
    taxonomy: str
    include_absent: bool = False
    images: List[ImageScore] = []
    dataset_miou: Optional[float] = None
    per_class_iou: Dict[str, Optional[float]] = {}
    mean_pixel_accuracy: float = 0.0


def _check_pair(pred: LabelMask, gt: LabelMask) -> None:
    if pred.labels.shape != gt.labels.shape:
        raise InputError(f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ in size")
    if pred.taxonomy != gt.taxonomy:
        raise InputError(f"prediction uses {pred.taxonomy.name}, ground truth uses {gt.taxonomy.name}")


def class_iou(pred: LabelMask, gt: LabelMask, class_id: int) -> Optional[float]:
    """IoU of one class; None (not applicable) when the class is in neither mask"""
    _check_pair(pred, gt)
    pred_pixels = pred.labels == class_id
    gt_pixels = gt.labels == class_id
    union = int(np.logical_or(pred_pixels, gt_pixels).sum())
    if union == 0:
        return None
    intersection = int(np.logical_and(pred_pixels, gt_pixels).sum())
    return intersection / union


def image_miou(
    pred: LabelMask, gt: LabelMask, taxonomy: Taxonomy, include_absent: bool = False
) -> Tuple[Dict[str, Optional[float]], Optional[float]]:
    """Per-class IoU row over foreground classes and their mean for one image"""
    _check_pair(pred, gt)
    if pred.taxonomy != taxonomy:
        raise InputError(f"masks use {pred.taxonomy.name}, evaluation asked for {taxonomy.name}")

    row: Dict[str, Optional[float]] = {}
    scores: List[float] = []
    for class_id in taxonomy.foreground_ids:
        iou = class_iou(pred, gt, class_id)
        row[taxonomy.class_name(class_id)] = iou
        if iou is not None:
            scores.append(iou)
        elif include_absent:
            scores.append(1.0)
    miou = sum(scores) / len(scores) if scores else None
    return row, miou


def pixel_accuracy(pred: LabelMask, gt: LabelMask) -> float:
    _check_pair(pred, gt)
    return int((pred.labels == gt.labels).sum()) / gt.labels.size


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def dataset_report(
    pairs: Sequence[Tuple[LabelMask, LabelMask]],
    names: Optional[Sequence[str]] = None,
    include_absent: bool = False,
) -> SegReport:
    """Dataset mIoU is the unweighted mean of per-image mIoU values"""
    if not pairs:
        raise InputError("no prediction/ground-truth pairs to evaluate")
    names = list(names) if names is not None else [f"image_{i:04d}" for i in range(len(pairs))]
    if len(names) != len(pairs):
        raise InputError(f"{len(names)} names for {len(pairs)} pairs")
    taxonomy = pairs[0][1].taxonomy

    images = []
    for name, (pred, gt) in zip(names, pairs):
        if gt.taxonomy != taxonomy:
            raise InputError(f"{name} uses {gt.taxonomy.name}, dataset uses {taxonomy.name}")
        row, miou = image_miou(pred, gt, taxonomy, include_absent=include_absent)
        images.append(ImageScore(name=name, per_class=row, miou=miou, pixel_accuracy=pixel_accuracy(pred, gt)))

    per_class = {
        taxonomy.class_name(class_id): _mean([image.per_class[taxonomy.class_name(class_id)] for image in images])
        for class_id in taxonomy.foreground_ids
    }
    return SegReport(
        taxonomy=taxonomy.name,
        include_absent=include_absent,
        images=images,
        dataset_miou=_mean([image.miou for image in images]),
        per_class_iou=per_class,
        mean_pixel_accuracy=sum(image.pixel_accuracy for image in images) / len(images),
    )


def count_accuracy(trays: Sequence[Tuple[int, int]], tray_ids: Optional[Sequence[str]] = None) -> CountReport:
    """Exact-match accuracy of detected vs ground-truth specimen counts"""
    if not trays:
        raise InputError("no trays to evaluate")
    tray_ids = list(tray_ids) if tray_ids is not None else [f"tray_{i:05d}" for i in range(len(trays))]
    if len(tray_ids) != len(trays):
        raise InputError(f"{len(tray_ids)} tray ids for {len(trays)} count pairs")

    per_tray = []
    for tray_id, (detected, ground_truth) in zip(tray_ids, trays):
        if detected < 0 or ground_truth < 0:
            raise InputError(f"tray {tray_id} has a negative count")
        per_tray.append(TrayCount(tray_id=tray_id, detected=detected, ground_truth=ground_truth,
                                  delta=detected - ground_truth))

    exact = sum(1 for t in per_tray if t.delta == 0)
    return CountReport(
        total_trays=len(per_tray),
        exact_matches=exact,
        over_count_trays=sum(1 for t in per_tray if t.delta > 0),
        under_count_trays=sum(1 for t in per_tray if t.delta < 0),
        accuracy=exact / len(per_tray),
        per_tray=per_tray,
    )


def format_percent(value: Optional[float]) -> str:
    """Display rounding only; reports keep full precision"""
    return "n/a" if value is None else f"{value * 100:.2f}%"


def render_count_report(report: CountReport) -> str:
    summary = tabulate(
        [
            ["trays", report.total_trays],
            ["exact matches", report.exact_matches],
            ["over-counted", report.over_count_trays],
            ["under-counted", report.under_count_trays],
            ["accuracy", format_percent(report.accuracy)],
        ],
        headers=["metric", "value"],
        tablefmt="simple",
    )
    mismatched = [[t.tray_id, t.detected, t.ground_truth, f"{t.delta:+d}"] for t in report.per_tray if t.delta]
    if not mismatched:
        return summary + "\n"
    details = tabulate(mismatched, headers=["tray", "detected", "ground truth", "delta"], tablefmt="simple")
    return f"{summary}\n\nMismatched trays\n{details}\n"


def render_seg_report(report: SegReport) -> str:
    class_names = list(report.per_class_iou)
    summary = tabulate(
        [[name, format_percent(score)] for name, score in report.per_class_iou.items()]
        + [["mIoU", format_percent(report.dataset_miou)],
           ["pixel accuracy", format_percent(report.mean_pixel_accuracy)]],
        headers=["class", "IoU"],
        tablefmt="simple",
    )
    rows = [
        [image.name] + [format_percent(image.per_class[name]) for name in class_names] + [format_percent(image.miou)]
        for image in report.images
    ]
    details = tabulate(rows, headers=["image"] + class_names + ["mIoU"], tablefmt="simple")
    return f"taxonomy: {report.taxonomy}\n{summary}\n\nPer image\n{details}\n"


def save_report(report: BaseModel, text: str, json_path: Path) -> Tuple[Path, Path]:
    """Write the machine-readable JSON and the aligned text table side by side"""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    text_path = json_path.with_suffix(".txt")
    text_path.write_text(text, encoding="utf-8")
    return json_path, text_path


def load_mask_pairs(pred_dir: Path, gt_dir: Path, taxonomy: Taxonomy) -> Tuple[List[str], List[Tuple[LabelMask, LabelMask]]]:
    """Pair palette masks by file name; every ground-truth mask needs a prediction"""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for label, directory in (("prediction", pred_dir), ("ground-truth", gt_dir)):
        if not directory.is_dir():
            raise InputError(f"{label} mask directory does not exist: {directory}")

    gt_files = sorted(gt_dir.rglob("*.png"))
    names, pairs = [], []
    for gt_file in gt_files:
        relative = gt_file.relative_to(gt_dir)
        pred_file = pred_dir / relative
        if not pred_file.is_file():
            raise InputError(f"no prediction for {relative.as_posix()} under {pred_dir}")
        names.append(relative.with_suffix("").as_posix())
        pairs.append((load_label_mask(pred_file, taxonomy), load_label_mask(gt_file, taxonomy)))
    logger.info(f"📂 Paired {len(pairs)} masks from {pred_dir} and {gt_dir}")
    return names, pairs


def comparison_panel(gt: LabelMask, pred: LabelMask, palette: Dict[int, Tuple[int, int, int]],
                     image: Optional[np.ndarray] = None, gap: int = 4) -> np.ndarray:
    """Side-by-side [crop |] ground truth | prediction, separated by white columns"""
    _check_pair(pred, gt)
    tiles = [colorize_mask(gt, palette), colorize_mask(pred, palette)]
    if image is not None:
        if image.shape[:2] != gt.labels.shape:
            image = resize_rgb(image, (gt.width, gt.height))
        tiles.insert(0, image)
    separator = np.full((gt.height, gap, 3), 255, dtype=np.uint8)
    columns: List[np.ndarray] = []
    for tile in tiles:
        if columns:
            columns.append(separator)
        columns.append(tile)
    return np.concatenate(columns, axis=1)


def save_comparison_panels(names: Sequence[str], pairs: Sequence[Tuple[LabelMask, LabelMask]],
                           palette: Dict[int, Tuple[int, int, int]], out_dir: Path,
                           images_dir: Optional[Path] = None) -> List[Path]:
    written = []
    for name, (pred, gt) in zip(names, pairs):
        image = None
        if images_dir is not None:
            image_path = Path(images_dir) / f"{name}.png"
            if image_path.is_file():
                image = load_rgb(image_path)
            else:
                logger.warning(f"⚠️ No crop image for {name} in {images_dir}")
        written.append(save_rgb(comparison_panel(gt, pred, palette, image), Path(out_dir) / f"{name}.png"))
    return written


def read_counts_csv(path: Path) -> Tuple[List[str], List[Tuple[int, int]]]:
    """tray_id,detected_count,ground_truth_count rows in file order"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"counts file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("tray_id", "detected_count", "ground_truth_count") if c not in frame.columns]
    if missing:
        raise InputError(f"counts file {path} lacks columns {missing}")
    try:
        pairs = [(int(d), int(g)) for d, g in zip(frame["detected_count"], frame["ground_truth_count"])]
    except ValueError as e:
        raise InputError(f"counts file {path} has a non-integer count: {e}") from e
    return list(frame["tray_id"]), pairs
