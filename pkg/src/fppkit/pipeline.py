"""Adaptive acquisition pipeline: decode, recognize state, complete.

The drive's orientation decides the depth strategy.  Annotations showing a
platter mean the glossy surface has punched holes into the measurement, so
unreliable regions get completed; a board-side view reconstructs with plain
triangulation and completion is provably never invoked (the diagnostics
record asserts it).
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .annotations import DEFAULT_TAXONOMY, AnnotationSet, Taxonomy
from .completion import (
    BACKEND_HARMONIC,
    BACKENDS,
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    CompletionRequest,
    CompletionResult,
    ExternalEndpoint,
    complete_depth,
)
from .errors import FppError, ParameterError, PipelineError
from .geometry import (
    DEFAULT_Z_MAX,
    DEFAULT_Z_MIN,
    CalibrationModel,
    DepthFrame,
    triangulate,
)
from .phase import (
    DEFAULT_MODULATION_FLOOR,
    DEFAULT_SATURATION_LEVEL,
    ImageStack,
    compute_wrapped_phase,
    decode_fringe_order,
    reliability_masks,
    unwrap_phase,
)

DEFAULT_MIN_CONFIDENCE = 0.5


class DriveState(enum.Enum):
    """Which face of the drive the camera sees."""

    PLATTER_FACING = "PlatterFacing"
    PCB_FACING = "PcbFacing"


def recognize_state(
    aset: AnnotationSet,
    taxonomy: Taxonomy = DEFAULT_TAXONOMY,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> DriveState:
    """Platter facing iff any sufficiently confident platter instance exists."""
    try:
        platter_id = taxonomy.id_of("Platter")
    except KeyError:
        raise ParameterError("taxonomy does not define a Platter class")
    for inst in aset.instances:
        if inst.class_id == platter_id and inst.confidence >= min_confidence:
            return DriveState.PLATTER_FACING
    return DriveState.PCB_FACING


@dataclass
class PipelineConfig:
    """Knobs for one pipeline run; defaults mirror the library defaults."""

    modulation_floor: float = DEFAULT_MODULATION_FLOOR
    saturation_level: float = DEFAULT_SATURATION_LEVEL
    min_confidence: float = DEFAULT_MIN_CONFIDENCE
    z_min: float = DEFAULT_Z_MIN
    z_max: float = DEFAULT_Z_MAX
    backend: str = BACKEND_HARMONIC
    endpoint: ExternalEndpoint | None = None
    completion_tol: float = DEFAULT_TOL
    completion_max_iter: int = DEFAULT_MAX_ITER
    n_threads: int = 1
    taxonomy: Taxonomy = field(default_factory=lambda: DEFAULT_TAXONOMY)

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ParameterError(
                f"unknown completion backend {self.backend!r}")


@dataclass
class PipelineResult:
    state: DriveState
    frame: DepthFrame
    diagnostics: dict


class _StageClock:
    """Times pipeline stages and tags any domain error with the stage."""

    def __init__(self) -> None:
        self.timings_ms: dict[str, float] = {}
        self._stage: str | None = None
        self._start = 0.0

    def __call__(self, stage: str) -> "_StageClock":
        self._stage = stage
        return self

    def __enter__(self) -> None:
        self._start = time.perf_counter()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.timings_ms[self._stage] = (
            (time.perf_counter() - self._start) * 1000.0)
        if exc is not None and isinstance(exc, FppError) and not isinstance(
                exc, PipelineError):
            raise PipelineError(f"{self._stage} stage failed: {exc}") from exc


def run_pipeline(
    stack: ImageStack,
    annotations: AnnotationSet,
    calib: CalibrationModel,
    config: PipelineConfig | None = None,
) -> PipelineResult:
    """Decode the stack, triangulate, and complete when platter facing.

    Diagnostics always record the recognized state, the reliable and
    unreliable pixel counts, per-stage timings in milliseconds, and, when
    completion ran, what the backend filled or skipped.
    """
    config = config or PipelineConfig()
    clock = _StageClock()

    with clock("decode-phase"):
        phase_map = compute_wrapped_phase(
            stack, modulation_floor=config.modulation_floor,
            n_threads=config.n_threads)
    with clock("decode-order"):
        order = decode_fringe_order(stack)
    with clock("unwrap"):
        absolute = unwrap_phase(phase_map, order)
    with clock("reliability"):
        reliability = reliability_masks(
            stack, phase_map, saturation_level=config.saturation_level,
            modulation_floor=config.modulation_floor)
    with clock("recognize-state"):
        state = recognize_state(annotations, config.taxonomy,
                                config.min_confidence)
    with clock("triangulate"):
        frame = triangulate(absolute, calib, z_min=config.z_min,
                            z_max=config.z_max)

    reliable = frame.valid & reliability.reliable
    unreliable = ~reliable
    diagnostics = {
        "state": state.value,
        "valid_pixels": int(frame.valid.sum()),
        "reliable_pixels": int(reliable.sum()),
        "unreliable_pixels": int(unreliable.sum()),
        "completion": {"invoked": False, "backend": None},
    }

    if state is DriveState.PLATTER_FACING:
        with clock("complete"):
            result = _complete(frame, stack.white, reliable, unreliable,
                               config)
        frame = result.frame
        diagnostics["completion"] = {
            "invoked": True,
            "backend": result.backend,
            "filled_pixels": result.filled_pixels,
            "skipped_holes": result.skipped_holes,
            "iterations": result.iterations,
            "residual": result.residual,
            "fallback_used": result.fallback_used,
            "trivial": bool(unreliable.sum() == 0),
        }

    diagnostics["timings_ms"] = clock.timings_ms
    diagnostics["output_valid_pixels"] = int(frame.valid.sum())
    return PipelineResult(state=state, frame=frame, diagnostics=diagnostics)


def _complete(frame: DepthFrame, white: np.ndarray, reliable: np.ndarray,
              unreliable: np.ndarray,
              config: PipelineConfig) -> CompletionResult:
    sparse = DepthFrame(
        z=np.where(reliable, frame.z, np.nan),
        world_xyz=np.where(reliable[..., None], frame.world_xyz, np.nan),
        valid=reliable,
        camera_intrinsics=frame.camera_intrinsics,
    )
    request = CompletionRequest(sparse_depth=sparse, guidance=white,
                                unreliable_mask=unreliable)
    return complete_depth(request, backend=config.backend,
                          endpoint=config.endpoint,
                          tol=config.completion_tol,
                          max_iter=config.completion_max_iter)
