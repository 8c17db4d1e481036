import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
from dotenv import load_dotenv

from src.config import PipelineConfig, load_config
from src.errors import PipelineError
from src.evaluation import format_percent, render_count_report, render_seg_report
from src.workflow import STAGES, BatchState, Workflow

load_dotenv()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_TRAYS = 2


def print_progress(message: str):
    print(f"📊 {message}")


def _load(config_path: Optional[Path], output: Optional[Path], workers: Optional[int] = None,
          check_paths: bool = True) -> PipelineConfig:
    overrides = {"output_dir": str(output) if output else None, "workers": workers}
    try:
        return load_config(config_path, overrides, check_paths=check_paths)
    except PipelineError as e:
        raise click.ClickException(str(e)) from e


def show_batch_summary(state: BatchState):
    print("\n📋 Batch summary")
    print("=" * 50)
    for stage in STAGES:
        summary = state.results.get(stage)
        if summary is None:
            continue
        print(f"{stage:>8}: ✅ {len(summary.succeeded)} ok  ⚠️ {len(summary.flagged)} flagged  "
              f"❌ {len(summary.failed)} failed  ⏭️ {len(summary.skipped)} resumed  "
              f"⛔ {len(summary.blocked)} blocked")
    if state.flagged_lines:
        print("\n⚠️ Check manually (also in flagged_trays.txt):")
        for line in state.flagged_lines:
            tray_id, stage, status, reason = line.split("\t", 3)
            print(f"   {tray_id} [{stage}, {status}] {reason}")


def run_stages(ctx: click.Context, stages: Sequence[str], config_path: Optional[Path], trays: Optional[str],
               workers: Optional[int], resume: bool, output: Optional[Path]):
    config = _load(config_path, output, workers)
    workflow = Workflow(config)
    workflow.set_progress_callback(print_progress)
    try:
        state = workflow.run(stages, tray_glob=trays, resume=resume)
    except PipelineError as e:
        raise click.ClickException(str(e)) from e

    show_batch_summary(state)
    if state.delivered() == 0:
        print("\n❌ No tray completed the requested stages")
        ctx.exit(EXIT_NO_TRAYS)
    ctx.exit(EXIT_OK)


def stage_options(command):
    """Options shared by every stage command"""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="YAML configuration file."),
        click.option("--trays", default=None, help="Glob over tray ids, e.g. 'NEON_2019_*'."),
        click.option("--workers", type=click.IntRange(min=1), default=None, help="Trays processed in parallel."),
        click.option("--resume", is_flag=True, help="Skip trays whose stage already completed."),
        click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None,
                     help="Output root (manifest, crops, masks, reports)."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """Beetle tray pipeline: detect specimens, crop them, segment their parts."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@stage_options
@click.pass_context
def detect(ctx, config_path, trays, workers, resume, output):
    """Stage 1: iterative detection with white masking and a final verifier check."""
    run_stages(ctx, ["detect"], config_path, trays, workers, resume, output)


@cli.command()
@stage_options
@click.pass_context
def crop(ctx, config_path, trays, workers, resume, output):
    """Stage 2: reading-order crops and the per-tray metadata CSV."""
    run_stages(ctx, ["crop"], config_path, trays, workers, resume, output)


@cli.command()
@stage_options
@click.pass_context
def segment(ctx, config_path, trays, workers, resume, output):
    """Stage 3: part masks, overlays and missing-part flags per crop."""
    run_stages(ctx, ["segment"], config_path, trays, workers, resume, output)


@cli.command("run-all")
@stage_options
@click.pass_context
def run_all(ctx, config_path, trays, workers, resume, output):
    """All three stages, one after the other."""
    run_stages(ctx, list(STAGES), config_path, trays, workers, resume, output)


@cli.group()
def evaluate():
    """Score detection counts or segmentation masks."""


@evaluate.command("counts")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--counts", "counts_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="CSV with tray_id,detected_count,ground_truth_count; default: manifest + ground truth.")
@click.pass_context
def evaluate_counts(ctx, config_path, output, counts_path):
    """Exact-match accuracy of detected vs expected specimen counts."""
    config = _load(config_path, output, check_paths=False)
    try:
        report = Workflow(config).evaluate_counts(counts_path)
    except PipelineError as e:
        raise click.ClickException(str(e)) from e

    print(render_count_report(report))
    print(f"✅ Count accuracy {format_percent(report.accuracy)} "
          f"({report.exact_matches}/{report.total_trays} trays)")
    ctx.exit(EXIT_OK)


@evaluate.command("segmentation")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--pred", "pred_dir", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Directory of predicted palette masks.")
@click.option("--gt", "gt_dir", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Directory of ground-truth palette masks (same file names).")
@click.option("--include-absent", is_flag=True, help="Count classes absent from both masks as IoU 1.0.")
@click.option("--panels", "panels_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Write ground truth | prediction comparison panels here.")
@click.option("--images", "images_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Crop images to prepend to each panel.")
@click.pass_context
def evaluate_segmentation(ctx, config_path, output, pred_dir, gt_dir, include_absent, panels_dir, images_dir):
    """Per-class IoU and mIoU of predicted masks against ground truth."""
    config = _load(config_path, output, check_paths=False)
    workflow = Workflow(config)
    workflow.set_progress_callback(print_progress)
    try:
        report = workflow.evaluate_segmentation(pred_dir, gt_dir, include_absent, panels_dir, images_dir)
    except PipelineError as e:
        raise click.ClickException(str(e)) from e

    print(render_seg_report(report))
    print(f"✅ Dataset mIoU {format_percent(report.dataset_miou)} over {len(report.images)} images")
    ctx.exit(EXIT_OK)


def run(argv: Optional[List[str]] = None) -> int:
    """Invoke the CLI and return its exit code; usage errors map to 1"""
    try:
        code = cli.main(args=argv, prog_name="beetle-pipeline", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        print("\n👋 Aborted")
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
