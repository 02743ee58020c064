"""
evortho - Pipeline Service

Runs the preprocessing chain over an output directory:

    sync -> gate -> keyframes -> reconstruct -> fuse -> export
         -> orthoproject -> evaluate

Every stage reads the previous stage's files and writes its own, so the
stages can run one at a time (CLI subcommands) or chained by ``run``:

    <output>/synced/            global-clock recording + sync_solution.txt
    <output>/gating/            timeline.csv, dropped.csv, rotation_gaps.csv, altitude_gaps.csv
    <output>/keyframes/         keyframes.csv
    <output>/recon/             kf_NNNNN.png + index.csv
    <output>/fused/             kf_NNNNN.png + index.csv
    <output>/export/            images, geo.csv, geo.txt, odm_params.txt
    <output>/ortho/             orthomosaic.png/.wld, truth_points.csv, report.csv
    <output>/stage_log.txt      stage=<name> key=value ... records

A failing stage leaves what it already wrote plus ``<output>/.partial``.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

from ..common import PipelineError, StageError
from ..config import PipelineConfig, get_settings
from ..models.schemas import REPORT_HEADER, FusionMethod, OrthoReport
from ..utils.imaging import read_image
from ..utils.stage_log import StageLog, format_record
from ..utils.timeline import ValidityTimeline
from .eval_service import evaluate_orthomap
from .fusion_service import fuse_keyframes
from .gating_service import (
    Keyframe,
    gate_recording,
    read_keyframes,
    select_keyframes,
    snap_keyframes,
    write_keyframes,
)
from .ortho_service import (
    coverage_mask,
    export_geotagged,
    orthoproject_frames,
    truth_correspondences,
    write_correspondences,
)
from .recon_service import reconstruct_at_keyframes, write_recon_frames
from .recording_service import read_frame_index, read_recording, write_recording
from .sync_service import SyncService, write_sync_solution

logger = logging.getLogger(__name__)

STAGES = ("sync", "gate", "keyframes", "reconstruct", "fuse", "export", "orthoproject", "evaluate")
PARTIAL_MARKER = ".partial"
STAGE_LOG = "stage_log.txt"


@dataclass
class PipelineResult:
    output: Path
    stages: List[str]
    report: Optional[OrthoReport] = None


class PipelineService:
    """One method per stage; each reads its inputs from ``output``."""

    def __init__(self, config: PipelineConfig, chunk_size: Optional[int] = None):
        self.config = config
        self.recording_dir, self.output = config.require_paths()
        self.chunk_size = chunk_size or get_settings().chunk_size
        self.workers = config.worker_count()
        self.log = StageLog(self.output / STAGE_LOG)

    # ── Paths ──

    @property
    def synced_dir(self) -> Path:
        return self.output / "synced"

    @property
    def gating_dir(self) -> Path:
        return self.output / "gating"

    @property
    def keyframes_path(self) -> Path:
        return self.output / "keyframes" / "keyframes.csv"

    @property
    def recon_dir(self) -> Path:
        return self.output / "recon"

    @property
    def fused_dir(self) -> Path:
        return self.output / "fused"

    @property
    def export_dir(self) -> Path:
        return self.output / "export"

    @property
    def ortho_dir(self) -> Path:
        return self.output / "ortho"

    def _synced(self):
        if not (self.synced_dir / "manifest.txt").is_file():
            raise PipelineError(f"no synchronized recording in {self.synced_dir} (run sync first)")
        return read_recording(self.synced_dir)

    def _keyframes(self) -> List[Keyframe]:
        if not self.keyframes_path.is_file():
            raise PipelineError(f"{self.keyframes_path} not found (run keyframes first)")
        return read_keyframes(self.keyframes_path)

    # ── Stages ──

    def sync(self) -> None:
        rec = read_recording(self.recording_dir)
        events_in = rec.events.count(self.chunk_size)
        synced, solution = SyncService(self.config.sync, self.workers).synchronize(rec)
        write_recording(synced, self.synced_dir, self.chunk_size)
        write_sync_solution(self.synced_dir / "sync_solution.txt", solution)
        events_out = read_recording(self.synced_dir, validate=False).events.count(self.chunk_size)
        self.log.record(
            "sync",
            events_in=events_in,
            events_out=events_out,
            frames=len(synced.frames),
            imu_in=len(rec.imu),
            imu_out=len(synced.imu),
            max_disagreement_ns=round(solution.max_disagreement_ns, 3),
        )

    def gate(self) -> None:
        rec = self._synced()
        result = gate_recording(rec, self.config.gate)
        self.gating_dir.mkdir(parents=True, exist_ok=True)
        result.combined.to_csv(self.gating_dir / "timeline.csv")
        result.dropped.to_csv(self.gating_dir / "dropped.csv")
        result.rotation_gaps.to_csv(self.gating_dir / "rotation_gaps.csv")
        result.altitude_gaps.to_csv(self.gating_dir / "altitude_gaps.csv")
        for start, end in result.dropped.intervals:
            self.log.record("gate", dropped_start_ns=int(start), dropped_end_ns=int(end))
        frames_kept = sum(1 for f in rec.frames if result.combined.contains(f.t_ns))
        self.log.record(
            "gate",
            valid_ns=result.combined.duration_ns,
            dropped_intervals=len(result.dropped),
            rotation_gaps=len(result.rotation_gaps),
            altitude_gaps=len(result.altitude_gaps),
            frames_kept=frames_kept,
            frames_dropped=len(rec.frames) - frames_kept,
        )

    def keyframes(self) -> None:
        rec = self._synced()
        timeline = ValidityTimeline.from_csv(self.gating_dir / "timeline.csv")
        times = select_keyframes(rec.gnss, timeline, self.config.keyframe.spacing)
        keyframes = snap_keyframes(times, rec.frames, timeline)
        self.keyframes_path.parent.mkdir(parents=True, exist_ok=True)
        write_keyframes(self.keyframes_path, keyframes)
        self.log.record("keyframes", candidates=len(times), keyframes=len(keyframes))

    def reconstruct(self) -> None:
        rec = self._synced()
        keyframes = self._keyframes()
        cfg = self.config.recon
        frames = reconstruct_at_keyframes(
            rec.events, [k.t_ns for k in keyframes], cfg,
            rec.calib_event.width, rec.calib_event.height,
            chunk_size=self.chunk_size, workers=self.workers,
        )
        write_recon_frames(self.recon_dir, frames, [k.pulse_index for k in keyframes], cfg.window_ns)
        self.log.record("reconstruct", frames=len(frames))

    def fuse(self) -> None:
        rec = self._synced()
        recon_frames = read_frame_index(self.recon_dir / "index.csv")
        rgb_by_pulse = {f.pulse_index: f for f in rec.frames}
        fused = fuse_keyframes(rec, self.recon_dir, recon_frames, rgb_by_pulse,
                               self.config.fusion, self.fused_dir)
        self.log.record("fuse", method=FusionMethod(self.config.fusion.method).value, frames=len(fused))

    def export(self) -> None:
        rec = self._synced()
        frames = read_frame_index(self.fused_dir / "index.csv")
        tagged = export_geotagged(frames, self.fused_dir, rec.gnss, self.export_dir,
                                  self.config.ortho.resolution)
        self.log.record("export", images=len(tagged))

    def orthoproject(self) -> None:
        rec = self._synced()
        frames = read_frame_index(self.fused_dir / "index.csv")
        ortho = self.config.ortho
        raster = orthoproject_frames(rec, frames, self.fused_dir, ortho.resolution,
                                     ortho.ground_alt, self.workers)
        self.ortho_dir.mkdir(parents=True, exist_ok=True)
        mosaic = self.ortho_dir / "orthomosaic.png"
        raster.write(mosaic)
        mask, covered = coverage_mask(raster)
        self.log.record("orthoproject", width=raster.shape[1], height=raster.shape[0],
                        covered_pixels=covered)

        truth = self.truth_texture(rec)
        if truth is not None:
            points = truth_correspondences(mosaic.with_suffix(".wld"), mask,
                                           truth.with_suffix(".wld"), read_image(truth).shape[:2])
            write_correspondences(self.ortho_dir / "truth_points.csv", points)

    def evaluate(self) -> Optional[OrthoReport]:
        rec = self._synced()
        truth = self.truth_texture(rec)
        if truth is None:
            logger.warning("recording has no truth texture; skipping evaluation")
            self.log.record("evaluate", status="skipped")
            return None
        report = evaluate_orthomap(
            self.ortho_dir / "orthomosaic.png",
            truth,
            self.ortho_dir / "truth_points.csv",
            sequence=rec.metadata.sequence,
            row_type=FusionMethod(self.config.fusion.method).report_label,
            masked=self.config.stages.evaluate_masked,
        )
        (self.ortho_dir / "report.csv").write_text(f"{REPORT_HEADER}\n{report.to_csv_row()}\n")
        self.log.record("evaluate", status=report.status, nonzero_pixels=report.nonzero_pixels)
        return report

    def truth_texture(self, rec) -> Optional[Path]:
        name = rec.metadata.truth_texture
        if not name:
            return None
        path = self.recording_dir / name
        return path if path.is_file() else None

    # ── Orchestration ──

    def run_stage(self, stage: str):
        """Run one stage; a failure leaves ``.partial`` and raises StageError."""
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        step: Callable = getattr(self, stage)
        started = time.perf_counter()
        self.output.mkdir(parents=True, exist_ok=True)
        try:
            result = step()
        except Exception as exc:
            cause = exc.cause if isinstance(exc, StageError) else exc
            if not isinstance(cause, PipelineError):
                logger.exception("Stage %s raised %s", stage, type(cause).__name__)
            error = " ".join(str(cause).split()) or type(cause).__name__
            (self.output / PARTIAL_MARKER).write_text(format_record("failed", name=stage, error=error) + "\n")
            raise StageError(stage, cause) from exc
        logger.info("Stage %s finished in %.2f s", stage, time.perf_counter() - started)
        return result

    def stages(self) -> List[str]:
        toggles = self.config.stages
        return [s for s in STAGES
                if not (s == "orthoproject" and not toggles.orthoproject)
                and not (s == "evaluate" and not (toggles.evaluate and toggles.orthoproject))]

    def run(self) -> PipelineResult:
        """Fresh output directory state, then every enabled stage in order."""
        self.output.mkdir(parents=True, exist_ok=True)
        (self.output / PARTIAL_MARKER).unlink(missing_ok=True)
        (self.output / STAGE_LOG).unlink(missing_ok=True)
        started = time.perf_counter()
        stages = self.stages()
        report = None
        for stage in stages:
            outcome = self.run_stage(stage)
            if stage == "evaluate":
                report = outcome
        logger.info("Pipeline finished in %.1f s (%d stages)", time.perf_counter() - started, len(stages))
        return PipelineResult(output=self.output, stages=stages, report=report)


def run_pipeline(config: PipelineConfig, chunk_size: Optional[int] = None) -> PipelineResult:
    return PipelineService(config, chunk_size).run()

