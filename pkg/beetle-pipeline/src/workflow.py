import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel

from .backends import BackendFactory
from .beetle_detector import run_iterative_detection, save_detection_output
from .config import PipelineConfig
from .crop_service import append_missing_parts, crop_boxes, crop_filename, match_metadata, sort_reading_order, write_tray_csv
from .errors import InputError, MetadataMismatch, PipelineError
from .evaluation import (
    CountReport, SegReport, count_accuracy, dataset_report, load_mask_pairs, read_counts_csv,
    render_count_report, render_seg_report, save_comparison_panels, save_report,
)
from .image_io import load_rgb, save_label_mask, save_rgb
from .manifest import ManifestStore
from .models import StageRecord, StageStatus, TrayEntry, TrayRecord
from .segment_service import completeness_check, crop_part, overlay_mask, segment_crop
from .tray_catalog import TrayCatalog, load_ground_truth

logger = logging.getLogger(__name__)

STAGES = ("detect", "crop", "segment")
PREREQUISITE = {"crop": "detect", "segment": "crop"}
FLAGGED_SUMMARY = "flagged_trays.txt"


class StageSummary(BaseModel):
    stage: str
    succeeded: List[str] = []
    flagged: List[str] = []
    failed: List[str] = []
    # Already complete and left alone by --resume
    skipped: List[str] = []
    # Prerequisite stage missing
    blocked: List[str] = []

    @property
    def ok_count(self) -> int:
        return len(self.succeeded) + len(self.skipped)


class BatchState(BaseModel):
    stages: List[str]
    tray_ids: List[str] = []
    resume: bool = False
    results: Dict[str, StageSummary] = {}
    flagged_lines: List[str] = []

    def delivered(self) -> int:
        """Trays that completed the last requested stage, resumed ones included"""
        ran = [stage for stage in STAGES if stage in self.results]
        return self.results[ran[-1]].ok_count if ran else 0


def _one_line(text: str) -> str:
    return " ".join((text or "").split())


class Workflow:
    """Runs detect, crop and segment over a batch of trays and keeps the run manifest"""

    def __init__(self, config: PipelineConfig, backend_factory: Optional[BackendFactory] = None):
        self.config = config
        self.backends = backend_factory or BackendFactory(config)
        self.output_dir = Path(config.output_dir)
        self.store = ManifestStore(self.output_dir)
        self.manifest = None
        self._trays: Dict[str, TrayRecord] = {}

        # Progress callback
        self.progress_callback = None

        # Build the workflow graph
        self.workflow = self._build_workflow()

    def set_progress_callback(self, callback: Callable[[str], None]):
        """Set progress callback for per-tray updates"""
        self.progress_callback = callback

    def _progress(self, message: str):
        if self.progress_callback:
            self.progress_callback(message)

    def _build_workflow(self):
        """Stage graph: each requested stage runs over the whole batch before the next starts"""
        workflow = StateGraph(BatchState)

        workflow.add_node("detect", self._detect_step)
        workflow.add_node("crop", self._crop_step)
        workflow.add_node("segment", self._segment_step)
        workflow.add_node("summarize", self._summarize_step)

        destinations = list(STAGES) + ["summarize"]
        workflow.add_conditional_edges(START, self._next_stage, destinations)
        for stage in STAGES:
            workflow.add_conditional_edges(stage, self._next_stage, destinations)
        workflow.add_edge("summarize", END)

        return workflow.compile()

    def _next_stage(self, state: BatchState) -> str:
        for stage in STAGES:
            if stage in state.stages and stage not in state.results:
                return stage
        return "summarize"

    def run(self, stages: Sequence[str], tray_glob: Optional[str] = None, resume: bool = False) -> BatchState:
        unknown = [stage for stage in stages if stage not in STAGES]
        if unknown:
            raise InputError(f"unknown stages {unknown}, expected some of {list(STAGES)}")

        self.manifest, config_changed = self.store.open(self.config.run_id())
        catalog = TrayCatalog(self.config)
        self._trays = {tray.tray_id: tray for tray in catalog.trays(tray_glob)}
        if not self._trays:
            self._progress("⚠️ No tray images matched the selection")

        initial_state = BatchState(
            stages=list(stages),
            tray_ids=list(self._trays),
            resume=resume and not config_changed,
        )
        final_state = self.workflow.invoke(initial_state)
        return BatchState.model_validate(final_state)

    def _detect_step(self, state: BatchState) -> Dict:
        self._progress(f"🔍 Detecting beetles on {len(state.tray_ids)} trays...")
        return self._run_stage("detect", state)

    def _crop_step(self, state: BatchState) -> Dict:
        self._progress("✂️ Cropping and matching metadata...")
        return self._run_stage("crop", state)

    def _segment_step(self, state: BatchState) -> Dict:
        self._progress("🎨 Segmenting beetle crops...")
        return self._run_stage("segment", state)

    def _summarize_step(self, state: BatchState) -> Dict:
        lines = self.write_flagged_summary()
        return {"flagged_lines": lines}

    def _run_stage(self, stage: str, state: BatchState) -> Dict:
        summary = StageSummary(stage=stage)
        task = {"detect": self._detect_tray, "crop": self._crop_tray, "segment": self._segment_tray}[stage]

        work = []
        for tray_id in state.tray_ids:
            entry = self.manifest.trays.get(tray_id)
            if state.resume and entry is not None and entry.stage(stage).completed:
                summary.skipped.append(tray_id)
                continue
            prerequisite = PREREQUISITE.get(stage)
            if prerequisite and (entry is None or not entry.stage(prerequisite).completed):
                logger.warning(f"⚠️ {tray_id}: {prerequisite} has not completed, skipping {stage}")
                self._progress(f"⚠️ {tray_id}: no {prerequisite} output, skipped")
                summary.blocked.append(tray_id)
                continue
            work.append(tray_id)

        # Workers compute; this thread is the only manifest writer
        with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
            futures = {
                executor.submit(task, self._trays[tray_id], self.manifest.trays.get(tray_id)): tray_id
                for tray_id in work
            }
            for future in as_completed(futures):
                tray_id = futures[future]
                try:
                    entry = future.result()
                except Exception as e:
                    previous = self.manifest.trays.get(tray_id) or TrayEntry(
                        tray_id=tray_id, image_path=self._trays[tray_id].image_path
                    )
                    entry = self._failed(previous, stage, e)
                self.manifest.trays[tray_id] = entry
                self.store.save(self.manifest)

                record = entry.stage(stage)
                if record.status == StageStatus.FAILED:
                    summary.failed.append(tray_id)
                    self._progress(f"❌ {tray_id}: {stage} failed: {record.reason}")
                else:
                    summary.succeeded.append(tray_id)
                    if record.status == StageStatus.FLAGGED:
                        summary.flagged.append(tray_id)
                        self._progress(f"⚠️ {tray_id}: {stage} flagged: {record.reason}")
                    else:
                        self._progress(f"✅ {tray_id}: {stage} done")

        for field in ("succeeded", "flagged", "failed"):
            getattr(summary, field).sort()
        self.store.save(self.manifest)
        logger.info(
            f"📊 {stage}: {len(summary.succeeded)} ok ({len(summary.flagged)} flagged), "
            f"{len(summary.failed)} failed, {len(summary.skipped)} resumed, {len(summary.blocked)} blocked"
        )
        return {"results": {**state.results, stage: summary}}

    def _rel(self, path: Path) -> str:
        return Path(path).relative_to(self.output_dir).as_posix()

    def _clear(self, directory: Path):
        """Remove images a previous run left behind"""
        if directory.is_dir():
            for stale in directory.glob("*.png"):
                stale.unlink()

    def _failed(self, entry: TrayEntry, stage: str, error: Exception) -> TrayEntry:
        if isinstance(error, PipelineError):
            reason = str(error)
            logger.error(f"❌ {entry.tray_id}: {stage} failed: {reason}")
        else:
            reason = f"unexpected error: {error}"
            logger.exception(f"❌ {entry.tray_id}: unexpected error during {stage}")
        return entry.model_copy(update={stage: StageRecord(status=StageStatus.FAILED, reason=reason or stage)})

    def _detect_tray(self, tray: TrayRecord, previous: Optional[TrayEntry]) -> TrayEntry:
        """Stage 1 for one tray; a new detection invalidates earlier crops and masks"""
        image_path = Path(os.path.relpath(Path(tray.image_path).resolve(), self.output_dir.resolve())).as_posix()
        entry = TrayEntry(tray_id=tray.tray_id, image_path=image_path)
        try:
            image = load_rgb(tray.image_path)
            detector = self.backends.detector(tray.tray_id)
            verifier = self.backends.verifier(tray.tray_id)
            outcome = run_iterative_detection(image, detector, verifier, self.config.detection)
            detection_path = save_detection_output(
                tray.tray_id, outcome, self.output_dir / "detections" / f"{tray.tray_id}.json"
            )
        except Exception as e:
            return self._failed(entry, "detect", e)

        status = StageStatus.FLAGGED if outcome.flagged else StageStatus.DONE
        if outcome.flagged:
            logger.warning(f"⚠️ {tray.tray_id}: {outcome.reason()}")
        return entry.model_copy(update={
            "detect": StageRecord(status=status, reason=outcome.reason()),
            "detections": outcome.detections,
            "iterations_used": outcome.iterations_used,
            "detection_path": self._rel(detection_path),
            "verdict": outcome.verdict,
            "raw_verifier_answer": outcome.raw_verifier_answer,
        })

    def _crop_tray(self, tray: TrayRecord, previous: TrayEntry) -> TrayEntry:
        """Stage 2: reading-order crops plus the tray CSV; a metadata mismatch only flags"""
        entry = previous.model_copy(update={
            "crop": StageRecord(), "segment": StageRecord(),
            "crop_paths": [], "csv_path": None,
            "mask_paths": [], "overlay_paths": [], "part_crop_paths": [], "missing_parts": {},
        })
        try:
            image = load_rgb(tray.image_path)
            boxes = [detection.box for detection in entry.detections]
            if self.config.sort.enabled:
                ordering = sort_reading_order(boxes, self.config.sort)
            else:
                ordering = list(range(len(boxes)))
            crops = crop_boxes(image, boxes, ordering, self.config.sort.crop_padding)
            ordered = [entry.detections[index] for index in ordering]

            crop_dir = self.output_dir / "crops" / tray.tray_id
            self._clear(crop_dir)
            crop_paths = [
                self._rel(save_rgb(crop, crop_dir / crop_filename(tray.tray_id, index)))
                for index, crop in enumerate(crops)
            ]

            matches, reason = [], None
            if tray.has_metadata:
                try:
                    matches = match_metadata(len(crops), tray)
                except MetadataMismatch as e:
                    reason = str(e)
                    logger.warning(f"⚠️ {tray.tray_id}: {reason}, writing the CSV without metadata")
            else:
                logger.debug(f"No metadata for {tray.tray_id}, writing a geometry-only CSV")
            csv_path = write_tray_csv(tray.tray_id, matches, ordered, self.output_dir / "csv" / f"{tray.tray_id}.csv")
        except Exception as e:
            return self._failed(entry, "crop", e)

        status = StageStatus.FLAGGED if reason else StageStatus.DONE
        return entry.model_copy(update={
            "crop": StageRecord(status=status, reason=reason),
            "crop_paths": crop_paths,
            "csv_path": self._rel(csv_path),
        })

    def _segment_tray(self, tray: TrayRecord, previous: TrayEntry) -> TrayEntry:
        """Stage 3: mask, overlay and completeness check per crop; bad crops flag the tray"""
        entry = previous.model_copy(update={
            "segment": StageRecord(),
            "mask_paths": [], "overlay_paths": [], "part_crop_paths": [], "missing_parts": {},
        })
        settings = self.config.segmentation
        taxonomy = settings.get_taxonomy()
        palette = settings.palette_by_id()
        mask_dir = self.output_dir / "masks" / tray.tray_id
        overlay_dir = self.output_dir / "overlays" / tray.tray_id
        part_dir = self.output_dir / "parts" / tray.tray_id

        try:
            segmenter = self.backends.segmenter(tray.tray_id)
            for directory in (mask_dir, overlay_dir, part_dir):
                self._clear(directory)
        except Exception as e:
            return self._failed(entry, "segment", e)

        mask_paths, overlay_paths, part_paths = [], [], []
        missing: Dict[str, List[str]] = {}
        crop_failures = []
        for crop_rel in entry.crop_paths:
            crop_name = Path(crop_rel).name
            stem = Path(crop_rel).stem
            try:
                crop = load_rgb(self.output_dir / crop_rel)
                mask = segment_crop(crop, segmenter, settings)
            except PipelineError as e:
                logger.warning(f"⚠️ {tray.tray_id}: segmentation of {crop_name} failed: {e}")
                crop_failures.append(crop_name)
                continue

            mask_paths.append(self._rel(save_label_mask(mask, palette, mask_dir / f"{stem}.png")))
            overlay = overlay_mask(crop, mask, palette, settings.overlay_alpha)
            overlay_paths.append(self._rel(save_rgb(overlay, overlay_dir / f"{stem}.png")))

            if settings.save_part_crops:
                for class_id in taxonomy.foreground_ids:
                    part = crop_part(crop, mask, class_id, settings.part_padding)
                    if part is not None:
                        part_file = part_dir / f"{stem}_{taxonomy.class_name(class_id)}.png"
                        part_paths.append(self._rel(save_rgb(part, part_file)))

            absent = completeness_check(mask, settings)
            if absent:
                missing[crop_name] = absent

        try:
            if entry.csv_path:
                append_missing_parts(self.output_dir / entry.csv_path, missing)
        except Exception as e:
            return self._failed(entry, "segment", e)

        updates = {
            "mask_paths": mask_paths,
            "overlay_paths": overlay_paths,
            "part_crop_paths": part_paths,
            "missing_parts": missing,
        }
        if entry.crop_paths and len(crop_failures) == len(entry.crop_paths):
            updates["segment"] = StageRecord(
                status=StageStatus.FAILED, reason=f"segmenter failed on every crop ({len(crop_failures)})"
            )
            return entry.model_copy(update=updates)

        reasons = []
        if crop_failures:
            reasons.append(f"segmentation failed for {', '.join(crop_failures)}")
        if missing:
            reasons.append("missing parts: " + "; ".join(
                f"{name} lacks {', '.join(parts)}" for name, parts in sorted(missing.items())
            ))
        status = StageStatus.FLAGGED if reasons else StageStatus.DONE
        updates["segment"] = StageRecord(status=status, reason=" | ".join(reasons) or None)
        return entry.model_copy(update=updates)

    def write_flagged_summary(self) -> List[str]:
        """tray_id, stage, status, reason for every flagged or failed stage in the manifest"""
        lines = []
        for tray_id in sorted(self.manifest.trays):
            entry = self.manifest.trays[tray_id]
            for stage in STAGES:
                record = entry.stage(stage)
                if record.status in (StageStatus.FLAGGED, StageStatus.FAILED):
                    lines.append("\t".join([tray_id, stage, record.status.value, _one_line(record.reason)]))

        self.output_dir.mkdir(parents=True, exist_ok=True)
        summary_path = self.output_dir / FLAGGED_SUMMARY
        summary_path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
        if lines:
            logger.info(f"⚠️ {len(lines)} flagged or failed stages listed in {summary_path}")
        return lines

    def evaluate_counts(self, counts_path: Optional[Path] = None) -> CountReport:
        """Exact-match count accuracy from a counts CSV, or from the manifest plus ground truth"""
        if counts_path is not None:
            tray_ids, pairs = read_counts_csv(counts_path)
        else:
            if self.config.ground_truth_path is None:
                raise InputError("no ground truth configured: set ground_truth_path or pass --counts")
            ground_truth = load_ground_truth(self.config.ground_truth_path)
            manifest = self.store.load()
            if manifest is None:
                raise InputError(f"no run manifest at {self.store.path}, run detect first")
            tray_ids, pairs = [], []
            for tray_id in sorted(manifest.trays):
                entry = manifest.trays[tray_id]
                if not entry.detect.completed:
                    continue
                if tray_id not in ground_truth:
                    logger.warning(f"⚠️ No ground truth for {tray_id} in {self.config.ground_truth_path}")
                    continue
                tray_ids.append(tray_id)
                pairs.append((len(entry.detections), ground_truth[tray_id]))

        report = count_accuracy(pairs, tray_ids)
        save_report(report, render_count_report(report), self.output_dir / "reports" / "counts.json")
        return report

    def evaluate_segmentation(self, pred_dir: Path, gt_dir: Path, include_absent: bool = False,
                              panels_dir: Optional[Path] = None, images_dir: Optional[Path] = None) -> SegReport:
        settings = self.config.segmentation
        names, pairs = load_mask_pairs(pred_dir, gt_dir, settings.get_taxonomy())
        report = dataset_report(pairs, names, include_absent=include_absent)
        save_report(report, render_seg_report(report), self.output_dir / "reports" / "segmentation.json")
        if panels_dir is not None:
            written = save_comparison_panels(names, pairs, settings.palette_by_id(), panels_dir, images_dir)
            self._progress(f"🖼️ Wrote {len(written)} comparison panels to {panels_dir}")
        return report
