"""Throughput measurement for the decode and completion stages.

Protocol: the stage input is built once, the stage runs a warmup that is not
measured, then a fixed number of timed iterations on a monotonic clock.
Defaults are 100 warmup and 1000 measured iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from time import perf_counter
from typing import Callable

import numpy as np

from .annotations import AnnotationSet
from .completion import CompletionRequest, complete_depth_harmonic
from .errors import ParameterError
from .geometry import DepthFrame, triangulate
from .patterns import PatternParams, generate_pattern_set
from .phase import compute_wrapped_phase, decode_fringe_order, unwrap_phase
from .pipeline import PipelineConfig, run_pipeline
from .scenes import build_scene, default_calibration
from .simulator import render_stack

DEFAULT_WARMUP = 100
DEFAULT_ITERS = 1000

BENCH_STAGES = (
    "decode-phase",
    "decode-order",
    "unwrap",
    "triangulate",
    "complete-harmonic",
    "pipeline",
)


@dataclass(frozen=True)
class BenchReport:
    operation: str
    warmup_iterations: int
    measured_iterations: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    throughput_fps: float
    input_shape: str

    def as_dict(self) -> dict:
        return {
            "operation": self.operation,
            "warmup_iterations": self.warmup_iterations,
            "measured_iterations": self.measured_iterations,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "throughput_fps": self.throughput_fps,
            "input_shape": self.input_shape,
        }


def run_bench(operation: str, stage_fn: Callable[[], object],
              warmup: int = DEFAULT_WARMUP, iters: int = DEFAULT_ITERS,
              input_shape: str = "") -> BenchReport:
    """Time ``stage_fn`` and summarize; the fixture must already be built."""
    if warmup < 0:
        raise ParameterError("warmup must be >= 0")
    if iters < 1:
        raise ParameterError("need at least 1 measured iteration")
    for _ in range(warmup):
        stage_fn()
    samples = np.empty(iters)
    for i in range(iters):
        start = perf_counter()
        stage_fn()
        samples[i] = (perf_counter() - start) * 1000.0
    mean = float(samples.mean())
    p50, p95 = (float(v) for v in np.percentile(samples, [50, 95]))
    return BenchReport(
        operation=operation,
        warmup_iterations=warmup,
        measured_iterations=iters,
        mean_ms=mean,
        p50_ms=p50,
        p95_ms=p95,
        throughput_fps=1000.0 / mean,
        input_shape=input_shape,
    )


def make_bench_stage(name: str, size: int = 512, n_threads: int = 1,
                     ) -> tuple[Callable[[], object], str]:
    """Build the named stage's input once and return (callable, shape note).

    All stages run on a rendered plane fixture so the numbers reflect
    realistic image content rather than zeros.
    """
    if name not in BENCH_STAGES:
        raise ParameterError(
            f"unknown bench stage {name!r}; stages: {', '.join(BENCH_STAGES)}")
    calib = default_calibration(size)
    scene = build_scene("plane", calib, size)
    params = PatternParams(width=912, height=1140,
                           fringe_period=calib.fringe_period)
    stack = render_stack(scene, generate_pattern_set(params), calib)
    shape = (f"{size}x{size}, N={params.num_shifts}, "
             f"G={params.num_code_bits}")

    if name == "decode-phase":
        return (lambda: compute_wrapped_phase(stack, n_threads=n_threads),
                shape)
    if name == "decode-order":
        return (lambda: decode_fringe_order(stack)), shape
    phase_map = compute_wrapped_phase(stack)
    order = decode_fringe_order(stack)
    if name == "unwrap":
        return (lambda: unwrap_phase(phase_map, order)), shape
    absolute = unwrap_phase(phase_map, order)
    if name == "triangulate":
        return (lambda: triangulate(absolute, calib)), shape
    if name == "pipeline":
        aset = AnnotationSet([], size, size)
        config = PipelineConfig(n_threads=n_threads)
        return (lambda: run_pipeline(stack, aset, calib, config)), shape

    # complete-harmonic: punch a disk hole into the triangulated plane.
    frame = triangulate(absolute, calib)
    yy, xx = np.mgrid[0:size, 0:size]
    hole = ((yy - size // 2) ** 2 + (xx - size // 2) ** 2
            <= (size // 16) ** 2)
    hole &= frame.valid
    sparse = DepthFrame(
        z=np.where(hole, np.nan, frame.z),
        world_xyz=np.where(hole[..., None], np.nan, frame.world_xyz),
        valid=frame.valid & ~hole,
        camera_intrinsics=frame.camera_intrinsics,
    )
    request = CompletionRequest(sparse_depth=sparse, guidance=stack.white,
                                unreliable_mask=hole)
    hole_note = f"{shape}, hole {int(hole.sum())}px"
    return (lambda: complete_depth_harmonic(request)), hole_note


def render_bench_table(report: BenchReport) -> str:
    lines = [
        f"{'operation':<20}{'mean ms':>10}{'p50 ms':>10}{'p95 ms':>10}"
        f"{'FPS':>10}",
        f"{report.operation:<20}{report.mean_ms:>10.3f}"
        f"{report.p50_ms:>10.3f}{report.p95_ms:>10.3f}"
        f"{report.throughput_fps:>10.1f}",
        f"input: {report.input_shape}; warmup {report.warmup_iterations}, "
        f"measured {report.measured_iterations}",
    ]
    return "\n".join(lines)
