"""
Tests for tray discovery, metadata sources, ground-truth files and the run manifest store.
"""

import json

import numpy as np
import pytest

from src.config import PipelineConfig
from src.errors import ConfigurationError, InputError
from src.image_io import save_rgb
from src.manifest import ManifestStore, to_json
from src.models import RunManifest, StageRecord, StageStatus, TrayEntry
from src.tray_catalog import MetadataSource, TrayCatalog, discover_trays, load_ground_truth


def touch_image(path):
    return save_rgb(np.zeros((4, 4, 3), dtype=np.uint8), path)


def test_discover_trays_filters_and_sorts(tmp_path):
    for name in ("NEON_2019_B.png", "NEON_2019_A.jpg", "OTHER_1.png", "notes.txt"):
        if name.endswith(".txt"):
            (tmp_path / name).write_text("x", encoding="utf-8")
        else:
            touch_image(tmp_path / name)
    (tmp_path / "nested").mkdir()
    touch_image(tmp_path / "nested" / "NEON_2019_C.png")

    assert [p.name for p in discover_trays(tmp_path)] == ["NEON_2019_A.jpg", "NEON_2019_B.png", "OTHER_1.png"]
    assert [p.stem for p in discover_trays(tmp_path, "NEON_*")] == ["NEON_2019_A", "NEON_2019_B"]
    assert discover_trays(tmp_path, "nothing*") == []


def test_discover_trays_rejects_duplicate_ids_and_missing_dirs(tmp_path):
    touch_image(tmp_path / "T1.png")
    touch_image(tmp_path / "T1.jpg")
    with pytest.raises(InputError):
        discover_trays(tmp_path)
    with pytest.raises(ConfigurationError):
        discover_trays(tmp_path / "absent")


def test_master_csv_is_partitioned_by_tray(tmp_path):
    master = tmp_path / "metadata.csv"
    master.write_text(
        "tray_id,catalog_number,taxon\n"
        "B,B-1,\"Carabus, sp.\"\n"
        "A,A-1,Pterostichus\n"
        "B,B-2,Amara\n",
        encoding="utf-8",
    )
    source = MetadataSource(master)
    assert source.rows_for("B") == [
        {"catalog_number": "B-1", "taxon": "Carabus, sp."},
        {"catalog_number": "B-2", "taxon": "Amara"},
    ]
    assert source.rows_for("A") == [{"catalog_number": "A-1", "taxon": "Pterostichus"}]
    assert source.rows_for("C") is None


def test_metadata_directory_and_bad_sources(tmp_path):
    (tmp_path / "meta").mkdir()
    (tmp_path / "meta" / "A.csv").write_text("catalog_number,empty\nA-1,\n", encoding="utf-8")
    source = MetadataSource(tmp_path / "meta")
    assert source.rows_for("A") == [{"catalog_number": "A-1", "empty": ""}]
    assert source.rows_for("B") is None

    (tmp_path / "no_tray.csv").write_text("catalog_number\nA-1\n", encoding="utf-8")
    with pytest.raises(InputError):
        MetadataSource(tmp_path / "no_tray.csv")
    with pytest.raises(ConfigurationError):
        MetadataSource(tmp_path / "absent")


def test_load_ground_truth(tmp_path):
    path = tmp_path / "gt.csv"
    path.write_text("tray_id,ground_truth_count\nA,5\nB,0\n", encoding="utf-8")
    assert load_ground_truth(path) == {"A": 5, "B": 0}

    for body in ("tray_id,count\nA,5\n", "tray_id,ground_truth_count\nA,5\nA,6\n",
                 "tray_id,ground_truth_count\nA,many\n", "tray_id,ground_truth_count\nA,-2\n"):
        path.write_text(body, encoding="utf-8")
        with pytest.raises(InputError):
            load_ground_truth(path)
    with pytest.raises(InputError):
        load_ground_truth(tmp_path / "absent.csv")


def test_catalog_drops_disagreeing_ground_truth(tmp_path):
    touch_image(tmp_path / "trays" / "A.png")
    touch_image(tmp_path / "trays" / "B.png")
    touch_image(tmp_path / "trays" / "C.png")
    (tmp_path / "meta").mkdir()
    (tmp_path / "meta" / "A.csv").write_text("n\n1\n2\n", encoding="utf-8")
    (tmp_path / "meta" / "B.csv").write_text("n\n1\n", encoding="utf-8")
    (tmp_path / "gt.csv").write_text("tray_id,ground_truth_count\nA,2\nB,3\nC,4\n", encoding="utf-8")

    config = PipelineConfig(input_dir=tmp_path / "trays", metadata_path=tmp_path / "meta",
                            ground_truth_path=tmp_path / "gt.csv")
    records = {record.tray_id: record for record in TrayCatalog(config).trays()}
    assert records["A"].ground_truth_count == 2
    assert records["B"].ground_truth_count is None
    assert records["C"].ground_truth_count == 4
    assert (records["A"].has_metadata, records["C"].has_metadata) == (True, False)
    assert records["C"].metadata_rows == []


def test_catalog_needs_an_input_dir():
    with pytest.raises(ConfigurationError):
        TrayCatalog(PipelineConfig()).trays()


def entry(tray_id: str) -> TrayEntry:
    return TrayEntry(tray_id=tray_id, image_path=f"../trays/{tray_id}.png",
                     detect=StageRecord(status=StageStatus.DONE))


def test_manifest_store_round_trip_and_canonical_text(tmp_path):
    store = ManifestStore(tmp_path / "out")
    assert store.load() is None

    manifest = RunManifest(run_id="abc", trays={"B": entry("B"), "A": entry("A")})
    path = store.save(manifest)
    text = path.read_text(encoding="utf-8")
    assert text == to_json(manifest)
    assert text.endswith("}\n")
    assert list(json.loads(text)["trays"]) == ["A", "B"]
    assert store.load() == manifest
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["manifest.json"]


def test_manifest_store_reports_changed_configuration(tmp_path):
    store = ManifestStore(tmp_path)
    manifest, changed = store.open("first")
    assert (manifest.run_id, changed) == ("first", False)

    store.save(RunManifest(run_id="first", trays={"A": entry("A")}))
    same, changed = store.open("first")
    assert not changed and "A" in same.trays
    other, changed = store.open("second")
    assert changed
    assert other.run_id == "second" and "A" in other.trays


def test_manifest_store_rejects_corrupt_files(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        ManifestStore(tmp_path).load()
