"""
Shared fixtures: a synthetic tray with six painted beetles, its scripted
backend fixtures, metadata and a config file, all under tmp_path.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pytest
import yaml

from src.config import SegmentationConfig
from src.image_io import save_label_mask, save_rgb
from src.models import LabelMask, Taxonomy

FIXTURES = Path(__file__).parent / "fixtures"

TRAY_SIZE = (320, 220)  # (width, height)
TRAY_COLOR = (200, 190, 170)
BEETLE_COLOR = (60, 40, 20)
MODEL_RESOLUTION = (64, 64)

# Two rows of three beetles, listed in reading order, with a few pixels of pin-height jitter
READING_ORDER_BOXES: List[Tuple[int, int, int, int]] = [
    (20, 20, 80, 80), (120, 23, 180, 83), (220, 18, 280, 78),
    (20, 121, 80, 181), (120, 118, 180, 178), (220, 120, 280, 180),
]
# Detection order of the two scripted rounds (indices into READING_ORDER_BOXES)
ROUNDS = [[4, 0, 5, 2], [3, 1]]


@pytest.fixture(autouse=True)
def hermetic_environment(monkeypatch):
    """Keep BEETLE_* settings from the developer's shell out of the tests"""
    for name in list(os.environ):
        if name.startswith("BEETLE_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def beetle5() -> Taxonomy:
    return Taxonomy.from_name("beetle5")


@pytest.fixture
def beetle9() -> Taxonomy:
    return Taxonomy.from_name("beetle9")


def candidate(box: Sequence[float], box_score: float = 0.8, text_score: float = 0.6) -> Dict:
    x_min, y_min, x_max, y_max = box
    return {"x_min": x_min, "y_min": y_min, "x_max": x_max, "y_max": y_max,
            "box_score": box_score, "text_score": text_score}


def part_mask(size: Tuple[int, int] = MODEL_RESOLUTION, shift: int = 0,
              classes: Sequence[str] = ("head", "pronotum", "elytra", "legs"),
              taxonomy: Optional[Taxonomy] = None) -> np.ndarray:
    """Label grid of a beetle seen from above: head, pronotum and elytra stacked, legs at the sides"""
    taxonomy = taxonomy or Taxonomy.from_name("beetle5")
    width, height = size
    labels = np.zeros((height, width), dtype=np.uint8)
    bands = {"head": (0.06, 0.22), "pronotum": (0.23, 0.40), "elytra": (0.41, 0.92)}
    left, right = int(width * 0.3) + shift % 3, int(width * 0.7) + shift % 3
    for name, (top, bottom) in bands.items():
        if name in classes:
            labels[int(height * top):int(height * bottom), left:right] = taxonomy.class_id(name)
    if "legs" in classes:
        labels[int(height * 0.45):int(height * 0.8), int(width * 0.12):int(width * 0.25)] = taxonomy.class_id("legs")
        labels[int(height * 0.45):int(height * 0.8), int(width * 0.75):int(width * 0.88)] = taxonomy.class_id("legs")
    return labels


def paint_tray(boxes: Sequence[Tuple[int, int, int, int]] = READING_ORDER_BOXES) -> np.ndarray:
    width, height = TRAY_SIZE
    image = np.zeros((height, width, 3), dtype=np.uint8)
    image[:, :] = TRAY_COLOR
    for x_min, y_min, x_max, y_max in boxes:
        image[y_min:y_max, x_min:x_max] = BEETLE_COLOR
        # pronotum highlight so crops are not flat
        image[y_min + 15:y_min + 25, x_min + 20:x_max - 20] = (110, 80, 40)
    return image


@dataclass
class TrayProject:
    root: Path
    config_path: Path
    output_dir: Path
    fixture_root: Path
    tray_ids: List[str]
    boxes: List[Tuple[int, int, int, int]] = field(default_factory=lambda: list(READING_ORDER_BOXES))

    def manifest(self) -> Dict:
        return json.loads((self.output_dir / "manifest.json").read_text(encoding="utf-8"))


@pytest.fixture
def tray_project(tmp_path):
    """Factory for a hermetic project directory; every tray shares the same scene"""

    def build(tray_ids: Sequence[str] = ("TRAY_A",), verifier_answers: Sequence[str] = ("NO",),
              metadata_rows: Optional[int] = 6, rounds: Optional[List[List[Dict]]] = None,
              masks: Optional[List[np.ndarray]] = None, taxonomy: str = "beetle5",
              config_extra: Optional[Dict] = None) -> TrayProject:
        root = tmp_path / "project"
        trays_dir = root / "trays"
        fixture_root = root / "fixtures"
        metadata_dir = root / "metadata"
        tax = Taxonomy.from_name(taxonomy)
        palette = SegmentationConfig(taxonomy=taxonomy).palette_by_id()

        if rounds is None:
            rounds = [[candidate(READING_ORDER_BOXES[i]) for i in round_] for round_ in ROUNDS]
        if masks is None:
            masks = [part_mask(shift=i, taxonomy=tax) for i in range(len(READING_ORDER_BOXES))]

        for tray_id in tray_ids:
            save_rgb(paint_tray(), trays_dir / f"{tray_id}.png")

            tray_fixtures = fixture_root / tray_id
            tray_fixtures.mkdir(parents=True, exist_ok=True)
            (tray_fixtures / "detector.json").write_text(json.dumps(rounds, indent=2), encoding="utf-8")
            (tray_fixtures / "verifier.json").write_text(json.dumps(list(verifier_answers)), encoding="utf-8")
            for index, labels in enumerate(masks):
                save_label_mask(LabelMask(labels=labels, taxonomy=tax), palette,
                                tray_fixtures / "masks" / f"mask_{index:03d}.png")

            if metadata_rows is not None:
                metadata_dir.mkdir(parents=True, exist_ok=True)
                frame = pd.DataFrame({
                    "catalog_number": [f"{tray_id}-{n:04d}" for n in range(metadata_rows)],
                    "taxon": ["Carabus nemoralis, Müller" if n % 2 else "Pterostichus melanarius"
                              for n in range(metadata_rows)],
                })
                frame.to_csv(metadata_dir / f"{tray_id}.csv", index=False)

        config = {
            "input_dir": "trays",
            "output_dir": "out",
            "fixture_root": "fixtures",
            "segmentation": {"taxonomy": taxonomy, "model_resolution": list(MODEL_RESOLUTION)},
        }
        if metadata_rows is not None:
            config["metadata_path"] = "metadata"
        for key, value in (config_extra or {}).items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key] = {**config[key], **value}
            else:
                config[key] = value
        config_path = root / "config.yaml"
        config_path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")

        return TrayProject(root=root, config_path=config_path, output_dir=root / "out",
                           fixture_root=fixture_root, tray_ids=list(tray_ids))

    return build
