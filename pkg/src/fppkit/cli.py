"""Command-line entry points.

Exit codes: 0 success, 1 domain failure (one ``error: <category>: ...`` line
on stderr), 2 usage error from argument parsing.  Settings resolve as
flags > config file > built-in defaults; pass ``--verbose`` to see where
each effective value came from.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .annotations import from_index_maps, load_labels, save_labels
from .bench import (
    BENCH_STAGES,
    DEFAULT_ITERS,
    DEFAULT_WARMUP,
    make_bench_stage,
    render_bench_table,
    run_bench,
)
from .completion import (
    BACKENDS,
    DEFAULT_TIMEOUT,
    HarmonicStubServer,
    parse_endpoint,
    serve_stdio,
)
from .errors import FppError, OutputExistsError, ParameterError
from .fusion_eval import (
    depth_metrics,
    detection_metrics,
    paint_labels,
    render_depth_table,
    render_detection_table,
)
from .geometry import (
    DepthFrame,
    camera_rays,
    load_calibration,
    save_calibration,
    triangulate,
)
from .imageio import read_f32_plane, read_mask_image, write_f32_plane, write_json
from .patterns import PatternParams, export_pattern_set, generate_pattern_set
from .phase import (
    compute_wrapped_phase,
    decode_fringe_order,
    load_stack,
    save_stack,
    unwrap_phase,
)
from .pipeline import PipelineConfig, run_pipeline
from .ply import export_pointcloud
from .scenes import SCENE_BUILDERS, build_scene, default_calibration
from .simulator import generate_dataset, render_stack

PROJECTOR_WIDTH = 912
PROJECTOR_HEIGHT = 1140


# ---------------------------------------------------------------------------
# Config file and setting resolution
# ---------------------------------------------------------------------------

def load_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file.

    Comments start with '#', section headers in brackets are ignored, and
    values may be single- or double-quoted.  Types are coerced when the
    setting is applied, using the same converter as its command-line flag.
    """
    data: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParameterError(
                f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        data[key.strip()] = value
    return data


class Settings:
    """Resolves one setting at a time with flag > config > default."""

    def __init__(self, args: argparse.Namespace) -> None:
        config_path = getattr(args, "config", None)
        self.config = load_config(config_path) if config_path else {}
        self.verbose = bool(getattr(args, "verbose", False))

    def get(self, args: argparse.Namespace, name: str, default, cast=None):
        attr = name.replace("-", "_")
        flag = getattr(args, attr, None)
        if flag is not None:
            value, source = flag, "flag"
        elif name in self.config:
            raw = self.config[name]
            try:
                value = cast(raw) if cast else raw
            except (TypeError, ValueError) as exc:
                raise ParameterError(
                    f"config value {name} = {raw!r} is invalid: {exc}")
            source = "config"
        else:
            value, source = default, "default"
        if self.verbose:
            print(f"fppkit: {name} = {value} [{source}]", file=sys.stderr)
        return value


def _require_empty_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise OutputExistsError(
            f"{out_dir} is not empty; pass --force to overwrite")


def _frame_from_plane(z: np.ndarray) -> DepthFrame:
    """Wrap a raw depth plane for metric evaluation (no real extrinsics)."""
    h, w = z.shape
    k = np.array([[1.0, 0.0, w / 2.0], [0.0, 1.0, h / 2.0], [0.0, 0.0, 1.0]])
    valid = np.isfinite(z)
    world = np.where(valid[..., None], camera_rays(k, h, w) * z[..., None],
                     np.nan)
    return DepthFrame(z=z, world_xyz=world, valid=valid,
                      camera_intrinsics=k)


def _decode_chain(stack, n_threads: int):
    phase_map = compute_wrapped_phase(stack, n_threads=n_threads)
    order = decode_fringe_order(stack)
    return phase_map, unwrap_phase(phase_map, order)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    settings = Settings(args)
    scene_name = settings.get(args, "scene", "plane")
    size = settings.get(args, "size", 512, int)
    seed = settings.get(args, "seed", 0, int)
    noise = settings.get(args, "noise", 0.0, float)
    out_dir = Path(args.out)
    _require_empty_dir(out_dir, args.force)

    calib = default_calibration(size)
    scene = build_scene(scene_name, calib, size)
    params = PatternParams(width=PROJECTOR_WIDTH, height=PROJECTOR_HEIGHT,
                           fringe_period=calib.fringe_period)
    rng = np.random.default_rng(seed) if noise > 0 else None
    stack = render_stack(scene, generate_pattern_set(params), calib,
                         noise_sigma=noise, rng=rng)

    save_stack(stack, out_dir / "stack", bit_depth=args.bit_depth)
    write_f32_plane(out_dir / "truth_depth.f32", scene.height_field)
    save_calibration(calib, out_dir / "calibration.json")
    annotations = from_index_maps(scene.material_index, scene.instance_index)
    save_labels(annotations, out_dir / "labels.txt")
    write_json(out_dir / "manifest.json", {
        "schema_version": 1,
        "kind": "simulated_fixture",
        "scene": scene_name,
        "size": size,
        "seed": seed,
        "noise_sigma": noise,
        "num_patterns": stack.num_shifts + stack.num_code_bits + 1,
        "files": {
            "stack": "stack",
            "truth_depth": "truth_depth.f32",
            "calibration": "calibration.json",
            "labels": "labels.txt",
        },
    })
    print(f"simulated {scene_name} at {size}x{size}: "
          f"{stack.num_shifts + stack.num_code_bits + 1} images, "
          f"{len(annotations.instances)} instances -> {out_dir}")
    return 0


def cmd_datagen(args: argparse.Namespace) -> int:
    settings = Settings(args)
    scene_name = settings.get(args, "scene", "hdd-platter")
    size = settings.get(args, "size", 512, int)
    seed = settings.get(args, "seed", 0, int)
    noise = settings.get(args, "noise", 0.01, float)
    threads = settings.get(args, "threads", 1, int)
    theta_max = settings.get(args, "theta-max", 359.0, float)
    delta = settings.get(args, "delta-theta", 1.0, float)

    calib = default_calibration(size)
    scene = build_scene(scene_name, calib, size)
    manifest = generate_dataset(
        scene, calib, (PROJECTOR_HEIGHT, PROJECTOR_WIDTH), args.out,
        theta_max=theta_max, delta_theta=delta, rng_seed=seed,
        noise_sigma=noise, force=args.force, n_threads=threads,
        scene_name=scene_name)
    print(f"dataset: {manifest['count']} orientations of {scene_name} "
          f"-> {args.out}")
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    settings = Settings(args)
    threads = settings.get(args, "threads", 1, int)
    stack = load_stack(args.stack)
    phase_map, absolute = _decode_chain(stack, threads)
    write_f32_plane(args.out, phase_map.wrapped, units="rad")
    if args.absolute_out:
        write_f32_plane(args.absolute_out, absolute.absolute, units="rad")
    if args.modulation_out:
        write_f32_plane(args.modulation_out, phase_map.modulation,
                        units="intensity")
    valid = float(phase_map.valid.mean())
    print(f"decoded {stack.width}x{stack.height} stack: "
          f"{valid:.1%} valid -> {args.out}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    settings = Settings(args)
    threads = settings.get(args, "threads", 1, int)
    stack = load_stack(args.stack)
    calib = load_calibration(args.calib)
    _, absolute = _decode_chain(stack, threads)
    frame = triangulate(absolute, calib)
    labels = None
    if args.labels:
        aset = load_labels(args.labels, stack.width, stack.height)
        labels = paint_labels(aset, stack.width, stack.height)
    count = export_pointcloud(frame, args.out, labels)
    if args.depth_out:
        write_f32_plane(args.depth_out, frame.z)
    print(f"reconstructed {count} points -> {args.out}")
    return 0


def cmd_pipeline_run(args: argparse.Namespace) -> int:
    settings = Settings(args)
    threads = settings.get(args, "threads", 1, int)
    backend = settings.get(args, "backend", "harmonic")
    endpoint_spec = settings.get(args, "endpoint", None)
    timeout = settings.get(args, "timeout", DEFAULT_TIMEOUT, float)

    stack = load_stack(args.stack)
    calib = load_calibration(args.calib)
    annotations = load_labels(args.labels, stack.width, stack.height)
    endpoint = parse_endpoint(endpoint_spec, timeout) if endpoint_spec else None
    config = PipelineConfig(backend=backend, endpoint=endpoint,
                            n_threads=threads)
    result = run_pipeline(stack, annotations, calib, config)

    if args.out:
        export_pointcloud(result.frame, args.out)
    if args.report:
        write_json(args.report, {
            "schema_version": 1,
            "kind": "pipeline_report",
            "diagnostics": result.diagnostics,
        })
    completion = result.diagnostics["completion"]
    print(f"state={result.diagnostics['state']} "
          f"completion={'invoked' if completion['invoked'] else 'skipped'} "
          f"valid={result.diagnostics['output_valid_pixels']}")
    return 0


def cmd_eval_depth(args: argparse.Namespace) -> int:
    predicted = read_f32_plane(args.pred).astype(np.float64)
    truth = read_f32_plane(args.truth).astype(np.float64)
    region_mask = None
    region = "all"
    if args.region_mask:
        region_mask = read_mask_image(args.region_mask)
        region = "unreliable-only"
    metrics = depth_metrics(_frame_from_plane(predicted), truth,
                            region_mask, region=region)
    print(render_depth_table(metrics))
    if args.json:
        write_json(args.json, {"schema_version": 1, "kind": "depth_metrics",
                               **metrics.as_dict()})
    return 0


def cmd_eval_detect(args: argparse.Namespace) -> int:
    settings = Settings(args)
    width = settings.get(args, "width", 512, int)
    height = settings.get(args, "height", 512, int)
    mode = settings.get(args, "mode", "box")
    pred = load_labels(args.pred, width, height)
    gt = load_labels(args.gt, width, height)
    metrics = detection_metrics([pred], [gt], mode=mode)
    print(render_detection_table(metrics))
    if args.json:
        write_json(args.json, {"schema_version": 1,
                               "kind": "detection_metrics",
                               **metrics.as_dict()})
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    settings = Settings(args)
    size = settings.get(args, "size", 512, int)
    warmup = settings.get(args, "warmup", DEFAULT_WARMUP, int)
    iters = settings.get(args, "iters", DEFAULT_ITERS, int)
    threads = settings.get(args, "threads", 1, int)
    stage_fn, shape = make_bench_stage(args.stage, size, threads)
    report = run_bench(args.stage, stage_fn, warmup, iters, shape)
    print(render_bench_table(report))
    if args.json:
        write_json(args.json, {"schema_version": 1, "kind": "bench_report",
                               **report.as_dict()})
    return 0


def cmd_patterns_export(args: argparse.Namespace) -> int:
    settings = Settings(args)
    width = settings.get(args, "width", PROJECTOR_WIDTH, int)
    height = settings.get(args, "height", PROJECTOR_HEIGHT, int)
    period = settings.get(args, "period", 24.0, float)
    shifts = settings.get(args, "shifts", 18, int)
    bits = settings.get(args, "bits", 6, int)
    params = PatternParams(width=width, height=height, fringe_period=period,
                           num_shifts=shifts, num_code_bits=bits,
                           orientation=args.orientation)
    pattern_set = generate_pattern_set(params,
                                       defocus_radius=args.defocus)
    written = export_pattern_set(pattern_set, args.out, args.bit_depth)
    print(f"wrote {len(written)} patterns -> {args.out}")
    return 0


def cmd_completion_serve(args: argparse.Namespace) -> int:
    if args.stdio:
        serve_stdio()
        return 0
    if not args.endpoint:
        raise ParameterError("give --endpoint tcp:...|unix:... or --stdio")
    endpoint = parse_endpoint(args.endpoint)
    with HarmonicStubServer(endpoint) as server:
        print(f"completion backend listening on {server.bound_address}",
              flush=True)
        if args.once:
            server.serve_one()
        else:
            server.serve_forever()
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fppkit",
        description="Structured-light scanning toolkit: simulate, decode, "
                    "reconstruct, evaluate.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path,
                        help="key = value settings file (flags win)")
    common.add_argument("--verbose", action="store_true",
                        help="print effective settings and their sources")

    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    scenes = sorted(SCENE_BUILDERS)

    p = sub.add_parser("simulate", parents=[common],
                       help="render one fringe stack with ground truth")
    p.add_argument("--scene", choices=scenes)
    p.add_argument("--size", type=_positive_int,
                   help="camera resolution (square), default 512")
    p.add_argument("--seed", type=int, help="noise stream seed, default 0")
    p.add_argument("--noise", type=float,
                   help="additive noise sigma, default 0 (noiseless)")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8,
                   help="stack image quantization")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("datagen", parents=[common],
                       help="rotation-sweep dataset of illuminated views")
    p.add_argument("--scene", choices=scenes)
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, help="default 0.01")
    p.add_argument("--theta-max", type=float, help="default 359")
    p.add_argument("--delta-theta", type=float, help="default 1")
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("decode", parents=[common],
                       help="decode a stack to wrapped phase")
    p.add_argument("--stack", required=True, type=Path,
                   help="stack directory with manifest.json")
    p.add_argument("--out", required=True, type=Path,
                   help="wrapped phase, raw float32 plane")
    p.add_argument("--absolute-out", type=Path,
                   help="also write unwrapped absolute phase")
    p.add_argument("--modulation-out", type=Path)
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="stack to point cloud via triangulation")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--calib", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output PLY")
    p.add_argument("--labels", type=Path,
                   help="label file; colors points by class")
    p.add_argument("--depth-out", type=Path)
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("pipeline", parents=[common],
                       help="state-gated reconstruction")
    pipe_sub = p.add_subparsers(dest="pipeline_command", required=True,
                                metavar="run")
    p = pipe_sub.add_parser("run", parents=[common])
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--calib", required=True, type=Path)
    p.add_argument("--labels", required=True, type=Path)
    p.add_argument("--out", type=Path, help="output PLY")
    p.add_argument("--report", type=Path, help="diagnostics JSON")
    p.add_argument("--backend", choices=sorted(BACKENDS))
    p.add_argument("--endpoint",
                   help="tcp:host:port | unix:/path | exec:command")
    p.add_argument("--timeout", type=float)
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_pipeline_run)

    p = sub.add_parser("eval", parents=[common], help="metric reports")
    eval_sub = p.add_subparsers(dest="eval_command", required=True,
                                metavar="depth|detect")
    p = eval_sub.add_parser("depth", parents=[common])
    p.add_argument("--pred", required=True, type=Path,
                   help="predicted depth, raw float32 plane")
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--region-mask", type=Path,
                   help="restrict to mask (e.g. unreliable pixels)")
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_eval_depth)
    p = eval_sub.add_parser("detect", parents=[common])
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--mode", choices=("box", "mask"))
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_eval_detect)

    p = sub.add_parser("bench", parents=[common],
                       help="stage throughput, 100 warmup + 1000 measured")
    p.add_argument("--stage", required=True, choices=BENCH_STAGES)
    p.add_argument("--size", type=_positive_int)
    p.add_argument("--warmup", type=_nonneg_int)
    p.add_argument("--iters", type=_positive_int)
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("patterns", parents=[common],
                       help="projector pattern generation")
    pat_sub = p.add_subparsers(dest="patterns_command", required=True,
                               metavar="export")
    p = pat_sub.add_parser("export", parents=[common])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--period", type=float)
    p.add_argument("--shifts", type=_positive_int)
    p.add_argument("--bits", type=_positive_int)
    p.add_argument("--orientation", choices=("vertical", "horizontal"),
                   default="vertical")
    p.add_argument("--defocus", type=_nonneg_int, default=0,
                   help="binary defocus kernel radius, 0 = off")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_patterns_export)

    p = sub.add_parser("completion-serve", parents=[common],
                       help="run the reference completion backend")
    p.add_argument("--endpoint", help="tcp:host:port or unix:/path")
    p.add_argument("--stdio", action="store_true",
                   help="serve one request on stdin/stdout (exec mode)")
    p.add_argument("--once", action="store_true",
                   help="exit after one request")
    p.set_defaults(func=cmd_completion_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FppError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
