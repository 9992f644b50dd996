"""Camera/projector geometry: calibration, ray-plane triangulation, depth.

The world frame coincides with the camera frame: camera at the origin looking
down +z, all lengths in millimetres.  The projector is a second pinhole
described by intrinsics plus its pose in the camera frame.  Absolute fringe
phase fixes one projector image coordinate per pixel, which constrains the
3-D point to a plane; intersecting the camera ray with that plane is a single
scalar division per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ParameterError
from .imageio import read_json, write_json
from .phase import AbsolutePhaseMap

VERTICAL = "vertical"
HORIZONTAL = "horizontal"

# Default working volume along the optical axis, millimetres.
DEFAULT_Z_MIN = 100.0
DEFAULT_Z_MAX = 2000.0

# Rays closer to parallel than this (plane equation denominator) are invalid.
PARALLEL_EPS = 1e-8

_ROTATION_TOL = 1e-6


def _check_intrinsics(k: np.ndarray, name: str) -> None:
    if k.shape != (3, 3):
        raise CalibrationError(f"{name} intrinsics must be 3x3, got {k.shape}")
    lower = np.array([k[1, 0], k[2, 0], k[2, 1]])
    if np.abs(lower).max() > 1e-9 or abs(k[2, 2] - 1.0) > 1e-9:
        raise CalibrationError(
            f"{name} intrinsics must be upper triangular with unit scale"
        )
    if k[0, 0] <= 0 or k[1, 1] <= 0:
        raise CalibrationError(f"{name} focal lengths must be positive")


@dataclass(frozen=True)
class CalibrationModel:
    """Pinhole camera/projector pair in the camera frame.

    Attributes:
        camera_intrinsics: 3x3 upper-triangular camera matrix, pixels.
        projector_intrinsics: 3x3 upper-triangular projector matrix, pixels.
        projector_rotation: 3x3 rotation, camera frame -> projector frame.
        projector_translation: 3-vector, millimetres.
        fringe_period: projector pixels per fringe period.
        coded_axis: "vertical" when fringes vary along projector columns.
    """

    camera_intrinsics: np.ndarray
    projector_intrinsics: np.ndarray
    projector_rotation: np.ndarray
    projector_translation: np.ndarray
    fringe_period: float
    coded_axis: str = VERTICAL

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "camera_intrinsics",
            np.asarray(self.camera_intrinsics, dtype=np.float64))
        object.__setattr__(
            self, "projector_intrinsics",
            np.asarray(self.projector_intrinsics, dtype=np.float64))
        object.__setattr__(
            self, "projector_rotation",
            np.asarray(self.projector_rotation, dtype=np.float64))
        object.__setattr__(
            self, "projector_translation",
            np.asarray(self.projector_translation, dtype=np.float64).reshape(3))
        _check_intrinsics(self.camera_intrinsics, "camera")
        _check_intrinsics(self.projector_intrinsics, "projector")
        r = self.projector_rotation
        if r.shape != (3, 3):
            raise CalibrationError("projector rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > _ROTATION_TOL:
            raise CalibrationError(
                "projector rotation is not orthonormal within "
                f"{_ROTATION_TOL:g}"
            )
        if np.linalg.det(r) < 0:
            raise CalibrationError("projector rotation must be right-handed")
        if not self.fringe_period > 0:
            raise CalibrationError("fringe period must be positive")
        if self.coded_axis not in (VERTICAL, HORIZONTAL):
            raise CalibrationError(f"unknown coded axis {self.coded_axis!r}")

    @property
    def projector_matrix(self) -> np.ndarray:
        """3x4 projection matrix mapping camera-frame points to the projector."""
        rt = np.hstack([self.projector_rotation,
                        self.projector_translation[:, None]])
        return self.projector_intrinsics @ rt


def load_calibration(path: str | Path) -> CalibrationModel:
    """Load a calibration JSON file.

    Raises:
        CalibrationError: missing fields, wrong shapes, unsupported units,
            non-zero distortion, or a non-orthonormal rotation.
    """
    path = Path(path)
    try:
        payload = read_json(path)
    except Exception as exc:
        raise CalibrationError(f"cannot parse {path}: {exc}") from exc

    def _require(container: dict, key: str, where: str):
        if key not in container:
            raise CalibrationError(f"{path}: missing field {where}{key!r}")
        return container[key]

    units = _require(payload, "units", "")
    if units != "mm":
        raise CalibrationError(f"{path}: unsupported units {units!r}, want 'mm'")
    camera = _require(payload, "camera", "")
    projector = _require(payload, "projector", "")
    for section, name in ((camera, "camera"), (projector, "projector")):
        distortion = np.asarray(section.get("distortion", []), dtype=np.float64)
        if distortion.size and np.abs(distortion).max() > 0:
            raise CalibrationError(
                f"{path}: {name} distortion is reserved and must be zero"
            )
    return CalibrationModel(
        camera_intrinsics=np.asarray(_require(camera, "intrinsics", "camera.")),
        projector_intrinsics=np.asarray(
            _require(projector, "intrinsics", "projector.")),
        projector_rotation=np.asarray(
            _require(projector, "rotation", "projector.")),
        projector_translation=np.asarray(
            _require(projector, "translation", "projector.")),
        fringe_period=float(_require(payload, "fringe_period", "")),
        coded_axis=payload.get("coded_axis", VERTICAL),
    )


def save_calibration(calib: CalibrationModel, path: str | Path) -> None:
    """Write a calibration model as row-major JSON (millimetre units)."""
    write_json(path, {
        "schema_version": 1,
        "units": "mm",
        "coded_axis": calib.coded_axis,
        "fringe_period": calib.fringe_period,
        "camera": {
            "intrinsics": calib.camera_intrinsics.tolist(),
            "distortion": [0.0] * 5,
        },
        "projector": {
            "intrinsics": calib.projector_intrinsics.tolist(),
            "rotation": calib.projector_rotation.tolist(),
            "translation": calib.projector_translation.tolist(),
            "distortion": [0.0] * 5,
        },
    })


@dataclass
class DepthFrame:
    """Per-pixel reconstruction result.

    Attributes:
        z: (H, W) depth along the camera optical axis, millimetres.
        world_xyz: (H, W, 3) camera-frame coordinates, millimetres.
        valid: (H, W) bool, True where z and world_xyz are meaningful.
        camera_intrinsics: the camera matrix the frame was built with; kept
            so later stages can convert filled-in depths back to 3-D points.
    """

    z: np.ndarray
    world_xyz: np.ndarray
    valid: np.ndarray
    camera_intrinsics: np.ndarray

    @property
    def height(self) -> int:
        return self.z.shape[0]

    @property
    def width(self) -> int:
        return self.z.shape[1]


def phase_to_projector_coord(absolute_phase: np.ndarray,
                             fringe_period: float) -> np.ndarray:
    """Absolute phase -> projector coordinate along the coded axis."""
    if not fringe_period > 0:
        raise ParameterError("fringe period must be positive")
    return absolute_phase * fringe_period / (2.0 * np.pi)


def camera_rays(camera_intrinsics: np.ndarray, height: int,
                width: int) -> np.ndarray:
    """Unit-z ray directions for every pixel centre, shape (H, W, 3)."""
    k_inv = np.linalg.inv(camera_intrinsics)
    uu, vv = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return pix @ k_inv.T


def world_points_from_depth(z: np.ndarray,
                            camera_intrinsics: np.ndarray) -> np.ndarray:
    """Back-project a depth image to camera-frame points, (H, W, 3)."""
    rays = camera_rays(camera_intrinsics, z.shape[0], z.shape[1])
    return rays * z[..., None]


def triangulate(
    phase_map: AbsolutePhaseMap,
    calib: CalibrationModel,
    z_min: float = DEFAULT_Z_MIN,
    z_max: float = DEFAULT_Z_MAX,
) -> DepthFrame:
    """Intersect camera rays with the projector plane fixed by the phase.

    For each pixel the absolute phase gives one projector image coordinate
    q = phase * T / (2*pi).  Points on the camera ray are X = z * d with d
    the pixel's unit-z direction.  Requiring X to project onto projector
    coordinate q gives a linear equation in the single unknown z:

        (p_a - q * p_z) . [z*d; 1] = 0

    with p_a the coded-axis row of the 3x4 projector matrix and p_z its
    homogeneous row.  Pixels with a near-parallel denominator (|.| <= 1e-8),
    invalid phase, or z outside [z_min, z_max] are marked invalid.
    """
    if z_min >= z_max or z_min <= 0:
        raise ParameterError(f"bad working volume [{z_min}, {z_max}]")
    height, width = phase_map.absolute.shape
    proj = calib.projector_matrix
    row = proj[0] if calib.coded_axis == VERTICAL else proj[1]
    hom = proj[2]

    q = phase_to_projector_coord(phase_map.absolute, calib.fringe_period)
    rays = camera_rays(calib.camera_intrinsics, height, width)

    # plane normal part dotted with the ray, plus the constant offset
    coeff = (row[:3] - q[..., None] * hom[:3])
    denom = np.einsum("hwc,hwc->hw", coeff, rays)
    offset = row[3] - q * hom[3]

    with np.errstate(divide="ignore", invalid="ignore"):
        z = -offset / denom
    solvable = np.abs(denom) > PARALLEL_EPS
    z = np.where(solvable, z, np.nan)

    valid = (
        phase_map.valid
        & solvable
        & np.isfinite(z)
        & (z >= z_min)
        & (z <= z_max)
    )
    z = np.where(valid, z, np.nan)
    world = rays * z[..., None]
    return DepthFrame(z=z, world_xyz=world, valid=valid,
                      camera_intrinsics=calib.camera_intrinsics.copy())


def project_to_projector(points: np.ndarray,
                         calib: CalibrationModel) -> np.ndarray:
    """Project camera-frame points into projector pixel coordinates.

    Args:
        points: (..., 3) camera-frame coordinates.

    Returns:
        (..., 2) projector (u, v); NaN where the point is behind the projector.
    """
    proj = calib.projector_matrix
    hom = points @ proj[:, :3].T + proj[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[..., :2] / hom[..., 2:3]
    return np.where(hom[..., 2:3] > 0, uv, np.nan)
