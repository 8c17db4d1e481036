"""
End-to-end tests of the command line on a synthetic tray with scripted backends.
"""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import READING_ORDER_BOXES, part_mask
from main import cli, run
from src.backends import BackendFactory
from src.crop_service import read_tray_csv
from src.errors import BackendError
from src.image_io import load_label_mask, load_rgb
from src.models import Taxonomy


def snapshot(directory):
    return {path.relative_to(directory).as_posix(): path.read_bytes()
            for path in sorted(directory.rglob("*")) if path.is_file()}


def run_all(project, *extra):
    return run(["run-all", "--config", str(project.config_path), *extra])


def test_run_all_end_to_end(tray_project, capsys):
    project = tray_project()
    assert run_all(project) == 0
    out = project.output_dir

    crops = sorted((out / "crops" / "TRAY_A").glob("*.png"))
    assert [p.name for p in crops] == [f"TRAY_A_{i:03d}.png" for i in range(6)]
    assert all(load_rgb(p).shape == (60, 60, 3) for p in crops)

    frame = read_tray_csv(out / "csv" / "TRAY_A.csv")
    assert len(frame) == 6
    assert [int(float(v)) for v in frame["x_min"]] == [box[0] for box in READING_ORDER_BOXES]
    assert [int(float(v)) for v in frame["y_min"]] == [box[1] for box in READING_ORDER_BOXES]
    assert list(frame["catalog_number"]) == [f"TRAY_A-{n:04d}" for n in range(6)]
    assert frame["taxon"][1] == "Carabus nemoralis, Müller"
    assert list(frame["missing_parts"]) == [""] * 6

    assert len(list((out / "masks" / "TRAY_A").glob("*.png"))) == 6
    assert len(list((out / "overlays" / "TRAY_A").glob("*.png"))) == 6
    assert (out / "flagged_trays.txt").read_text(encoding="utf-8") == ""

    detections = json.loads((out / "detections" / "TRAY_A.json").read_text(encoding="utf-8"))
    assert detections["verdict"] == "VERIFIED_CLEAR"
    assert [d["iteration"] for d in detections["detections"]] == [0, 0, 0, 0, 1, 1]
    assert all(d["area"] == 3600 for d in detections["detections"])

    entry = project.manifest()["trays"]["TRAY_A"]
    assert [entry[stage]["status"] for stage in ("detect", "crop", "segment")] == ["done"] * 3
    assert entry["image_path"] == "../trays/TRAY_A.png"
    assert "📊" in capsys.readouterr().out


def test_rerun_is_byte_identical(tray_project):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B"))
    assert run_all(project) == 0
    first = snapshot(project.output_dir)
    assert run_all(project) == 0
    assert snapshot(project.output_dir) == first


def test_resume_skips_completed_trays_without_backend_calls(tray_project, monkeypatch, capsys):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B"))
    assert run_all(project) == 0
    first = snapshot(project.output_dir)

    def forbidden(self, tray_id):
        raise AssertionError(f"backend built for {tray_id} during resume")

    for role in ("detector", "verifier", "segmenter"):
        monkeypatch.setattr(BackendFactory, role, forbidden)
    capsys.readouterr()
    assert run_all(project, "--resume") == 0
    assert "⏭️ 2 resumed" in capsys.readouterr().out
    assert snapshot(project.output_dir) == first


def test_interrupted_batch_resumes_to_the_same_outputs(tray_project, monkeypatch):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B", "TRAY_C"))
    reference, interrupted = project.root / "reference", project.root / "interrupted"
    assert run_all(project, "--output", str(reference)) == 0

    scripted = BackendFactory.detector

    def dies_on_tray_b(self, tray_id):
        if tray_id == "TRAY_B":
            raise BackendError("detector process killed")
        return scripted(self, tray_id)

    with monkeypatch.context() as patch:
        patch.setattr(BackendFactory, "detector", dies_on_tray_b)
        assert run_all(project, "--output", str(interrupted)) == 0
    trays = json.loads((interrupted / "manifest.json").read_text(encoding="utf-8"))["trays"]
    assert trays["TRAY_B"]["detect"]["status"] == "failed"
    assert snapshot(interrupted) != snapshot(reference)

    assert run_all(project, "--output", str(interrupted), "--resume") == 0
    assert snapshot(interrupted) == snapshot(reference)


def test_resume_reruns_after_a_configuration_change(tray_project, capsys):
    project = tray_project()
    assert run_all(project) == 0
    config = project.config_path.read_text(encoding="utf-8")
    project.config_path.write_text(config + "sort:\n  row_tolerance_factor: 0.4\n", encoding="utf-8")

    capsys.readouterr()
    assert run_all(project, "--resume") == 0
    assert "⏭️ 0 resumed" in capsys.readouterr().out


def test_metadata_mismatch_flags_the_crop_stage(tray_project):
    project = tray_project(metadata_rows=5)
    assert run_all(project) == 0
    out = project.output_dir

    frame = read_tray_csv(out / "csv" / "TRAY_A.csv")
    assert len(frame) == 6
    assert "catalog_number" not in frame.columns
    entry = project.manifest()["trays"]["TRAY_A"]
    assert entry["crop"]["status"] == "flagged"
    assert "6 crops vs 5 metadata rows" in entry["crop"]["reason"]
    assert (out / "flagged_trays.txt").read_text(encoding="utf-8").startswith("TRAY_A\tcrop\tflagged\t")


def test_trays_without_metadata_get_geometry_only_csv(tray_project):
    project = tray_project(metadata_rows=None)
    assert run_all(project) == 0
    frame = read_tray_csv(project.output_dir / "csv" / "TRAY_A.csv")
    assert list(frame.columns)[:8] == ["tray_id", "crop_index", "crop_filename", "x_min", "y_min",
                                       "x_max", "y_max", "box_score"]
    assert project.manifest()["trays"]["TRAY_A"]["crop"]["status"] == "done"


def test_residual_verdict_is_listed_for_manual_checking(tray_project, capsys):
    project = tray_project(verifier_answers=("There is still one near the corner. YES",))
    assert run_all(project) == 0

    lines = (project.output_dir / "flagged_trays.txt").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    tray_id, stage, status, reason = lines[0].split("\t")
    assert (tray_id, stage, status) == ("TRAY_A", "detect", "flagged")
    assert "check manually" in reason
    assert "Check manually" in capsys.readouterr().out
    # A flag is advisory: later stages still ran
    assert project.manifest()["trays"]["TRAY_A"]["segment"]["status"] == "done"


def test_crop_before_detect_exits_with_2(tray_project, capsys):
    project = tray_project()
    assert run(["crop", "--config", str(project.config_path)]) == 2
    assert "⛔ 1 blocked" in capsys.readouterr().out


def test_stages_can_run_one_at_a_time(tray_project):
    project = tray_project()
    for stage in ("detect", "crop", "segment"):
        assert run([stage, "--config", str(project.config_path)]) == 0
    entry = project.manifest()["trays"]["TRAY_A"]
    assert entry["segment"]["status"] == "done"
    assert len(entry["mask_paths"]) == 6


def test_unreadable_tray_fails_alone(tray_project):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B"))
    (project.root / "trays" / "TRAY_B.png").write_bytes(b"not an image")
    assert run_all(project) == 0

    trays = project.manifest()["trays"]
    assert trays["TRAY_A"]["segment"]["status"] == "done"
    assert trays["TRAY_B"]["detect"]["status"] == "failed"
    assert trays["TRAY_B"]["crop"]["status"] == "pending"
    lines = (project.output_dir / "flagged_trays.txt").read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[:3] for line in lines] == [["TRAY_B", "detect", "failed"]]


def test_every_tray_failing_exits_with_2(tray_project):
    project = tray_project()
    (project.root / "trays" / "TRAY_A.png").write_bytes(b"broken")
    assert run(["detect", "--config", str(project.config_path)]) == 2


def test_worker_count_does_not_change_outputs(tray_project):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B", "TRAY_C", "TRAY_D"))
    serial, parallel = project.root / "serial", project.root / "parallel"
    assert run_all(project, "--output", str(serial)) == 0
    assert run_all(project, "--workers", "3", "--output", str(parallel)) == 0
    assert snapshot(serial) == snapshot(parallel)


def test_tray_selection_glob(tray_project):
    project = tray_project(tray_ids=("NEON_1", "NEON_2", "OTHER_1"))
    assert run_all(project, "--trays", "NEON_*") == 0
    assert sorted(project.manifest()["trays"]) == ["NEON_1", "NEON_2"]


def test_missing_head_flags_the_segment_stage(tray_project):
    masks = [part_mask(shift=i) for i in range(6)]
    masks[3] = part_mask(classes=("pronotum", "elytra", "legs"))
    project = tray_project(masks=masks)
    assert run_all(project) == 0

    entry = project.manifest()["trays"]["TRAY_A"]
    assert entry["segment"]["status"] == "flagged"
    assert entry["missing_parts"] == {"TRAY_A_003.png": ["head"]}
    frame = read_tray_csv(project.output_dir / "csv" / "TRAY_A.csv")
    assert list(frame["missing_parts"]) == ["", "", "", "head", "", ""]


def test_part_crops(tray_project):
    project = tray_project(config_extra={"segmentation": {"save_part_crops": True}})
    assert run_all(project) == 0
    parts = sorted(p.name for p in (project.output_dir / "parts" / "TRAY_A").glob("*.png"))
    assert len(parts) == 24
    assert "TRAY_A_000_head.png" in parts
    assert not any(name.endswith("_antennas.png") for name in parts)


def test_beetle9_taxonomy(tray_project):
    project = tray_project(taxonomy="beetle9")
    assert run_all(project) == 0
    beetle9 = Taxonomy.from_name("beetle9")
    mask = load_label_mask(project.output_dir / "masks" / "TRAY_A" / "TRAY_A_000.png", beetle9)
    assert (mask.width, mask.height) == (60, 60)
    assert set(mask.present_ids()) <= {0, 1, 2, 3, 4}


def test_evaluate_counts_from_the_manifest(tray_project, capsys):
    project = tray_project(tray_ids=("TRAY_A", "TRAY_B"))
    (project.root / "gt.csv").write_text("tray_id,ground_truth_count\nTRAY_A,6\nTRAY_B,7\n", encoding="utf-8")
    config = project.config_path.read_text(encoding="utf-8")
    project.config_path.write_text(config + "ground_truth_path: gt.csv\n", encoding="utf-8")

    assert run(["detect", "--config", str(project.config_path)]) == 0
    capsys.readouterr()
    assert run(["evaluate", "counts", "--config", str(project.config_path)]) == 0
    assert "50.00%" in capsys.readouterr().out
    report = json.loads((project.output_dir / "reports" / "counts.json").read_text(encoding="utf-8"))
    assert report["under_count_trays"] == 1


def test_overlays_blend_over_the_crop(tray_project):
    project = tray_project()
    assert run_all(project) == 0
    crop = load_rgb(project.output_dir / "crops" / "TRAY_A" / "TRAY_A_000.png")
    overlay = load_rgb(project.output_dir / "overlays" / "TRAY_A" / "TRAY_A_000.png")
    mask = load_label_mask(project.output_dir / "masks" / "TRAY_A" / "TRAY_A_000.png",
                           Taxonomy.from_name("beetle5"))
    background = mask.labels == 0
    assert np.array_equal(overlay[background], crop[background])
    assert not np.array_equal(overlay[~background], crop[~background])


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["run-all", "--workers", "0"],
    ["detect", "--config", "/nonexistent/config.yaml"],
])
def test_usage_errors_exit_with_1(argv):
    assert run(argv) == 1


def test_bad_config_exits_with_1(tmp_path):
    config = tmp_path / "config.yaml"
    config.write_text("detector:\n  name: yolo\n", encoding="utf-8")
    assert run(["detect", "--config", str(config)]) == 1


def test_help_lists_every_command():
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("detect", "crop", "segment", "run-all", "evaluate"):
        assert command in result.output
    evaluate_help = CliRunner().invoke(cli, ["evaluate", "--help"])
    assert "counts" in evaluate_help.output and "segmentation" in evaluate_help.output
