"""Structured-light reconstruction toolkit for fringe projection scanning.

Submodules:
    patterns     projector pattern generation
    phase        wrapped/absolute phase decoding
    geometry     calibration, triangulation, point cloud export
    simulator    digital-twin rendering and dataset sweeps
    annotations  instance polygons, taxonomy, fastener association
    pipeline     state-gated reconstruction with depth completion
    fusion_eval  2D/3D fusion and evaluation metrics
    bench        micro-benchmark harness
    cli          command-line entry points
"""

__version__ = "0.1.0"
