"""
evortho - Services

One module per pipeline concern.
"""

from .sync_service import SyncService
from .pipeline_service import PipelineService, run_pipeline
from .simulation_service import SimulationService, simulate

__all__ = [
    "SyncService",
    "PipelineService",
    "run_pipeline",
    "SimulationService",
    "simulate",
]
