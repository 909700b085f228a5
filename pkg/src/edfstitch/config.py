"""Aggregate pipeline configuration for the CLI and the stitch orchestrator."""

from __future__ import annotations

from dataclasses import dataclass, field

from .calibration import RefineConfig
from .edf import EDFConfig
from .geometry import RansacConfig


@dataclass
class WarpConfig:
    canvas_cap: float = 64.0   # max canvas area as a multiple of the reference area


@dataclass
class PipelineConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    edf: EDFConfig = field(default_factory=EDFConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    focal_hint: float | None = None
