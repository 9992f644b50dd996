"""Digital-twin renderer: height fields to captured-looking image stacks.

Rendering is analytic per pixel: each camera pixel back-projects to its 3-D
surface point, that point is projected into the projector, and the pattern is
sampled at the resulting coordinate along the coded axis.  No rasterization
or visibility solver is involved, so the forward model is exact for the
pinhole pair and reconstruction errors in closed-loop tests come only from
the decode chain itself.

Sampling convention: fringe intensity is evaluated from the continuous
phase-shift law at the (fractional) projector coordinate, since the fringe
pattern images are exact integer samples of that law.  Binary code planes
are sampled at pixel extent (projector pixel c illuminates [c, c+1)), which
keeps code words sharp.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import OutputExistsError, ParameterError
from .geometry import HORIZONTAL, VERTICAL, CalibrationModel, camera_rays
from .imageio import write_f32_plane, write_gray_image, write_json, write_mask_image
from .patterns import PatternSet
from .phase import ImageStack

logger = logging.getLogger(__name__)

# Stray light reaching every pixel regardless of the projected pattern.
DEFAULT_AMBIENT = 0.02
DEFAULT_NOISE_SIGMA = 0.01


@dataclass
class SceneSpec:
    """Everything the renderer needs to know about a scene.

    Attributes:
        height_field: (H, W) depth along the camera axis per pixel, mm.
        albedo: (H, W) reflectance; values above 1 model glossy surfaces
            whose reflection clips the sensor.
        material_index: (H, W) int, 0 = background, 1..K = material classes.
        instance_index: (H, W) int, 0 = background, else instance id.
        shadow: (H, W) bool, True where projector light cannot reach.
        num_materials: K, the number of addressable material slots; mask
            rendering always emits exactly K masks even when some are empty.
        pose_theta: accumulated in-plane rotation of the scene, degrees.
    """

    height_field: np.ndarray
    albedo: np.ndarray
    material_index: np.ndarray
    instance_index: np.ndarray
    shadow: np.ndarray
    num_materials: int
    pose_theta: float = 0.0

    def __post_init__(self) -> None:
        shapes = {self.height_field.shape, self.albedo.shape,
                  self.material_index.shape, self.instance_index.shape,
                  self.shadow.shape}
        if len(shapes) != 1:
            raise ParameterError(f"scene map dimensions disagree: {shapes}")
        if self.num_materials < 1:
            raise ParameterError("a scene needs at least one material slot")
        if self.material_index.min() < 0 or (
                self.material_index.max() > self.num_materials):
            raise ParameterError(
                "material indices must lie in [0, num_materials]")

    @property
    def height(self) -> int:
        return self.height_field.shape[0]

    @property
    def width(self) -> int:
        return self.height_field.shape[1]


@dataclass(frozen=True)
class MaterialRandomization:
    """Per-material appearance jitter ranges for dataset sweeps."""

    roughness_range: tuple[float, float] = (0.2, 0.8)
    brightness_range: tuple[float, float] = (0.7, 1.3)


def _projector_coords(scene: SceneSpec,
                      calib: CalibrationModel) -> tuple[np.ndarray, np.ndarray]:
    """Continuous projector (u, v) per camera pixel, NaN where behind."""
    rays = camera_rays(calib.camera_intrinsics, scene.height, scene.width)
    pts = rays * scene.height_field[..., None]
    proj = calib.projector_matrix
    hom = pts @ proj[:, :3].T + proj[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[..., :2] / hom[..., 2:3]
    uv = np.where(hom[..., 2:3] > 0, uv, np.nan)
    return uv[..., 0], uv[..., 1]


def _illumination(scene: SceneSpec, calib: CalibrationModel,
                  pattern_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Effective albedo seen under projector light, plus the coded coordinate."""
    u_p, v_p = _projector_coords(scene, calib)
    coded = u_p if calib.coded_axis == VERTICAL else v_p
    other = v_p if calib.coded_axis == VERTICAL else u_p
    proj_h, proj_w = pattern_shape
    coded_extent = proj_w if calib.coded_axis == VERTICAL else proj_h
    other_extent = proj_h if calib.coded_axis == VERTICAL else proj_w
    lit = (
        np.isfinite(coded) & np.isfinite(other)
        & (coded >= 0) & (coded <= coded_extent - 1)
        & (other >= 0) & (other <= other_extent - 1)
        & ~scene.shadow
    )
    albedo = np.where(lit, scene.albedo, 0.0)
    coded = np.where(lit, coded, 0.0)
    return albedo, coded


def _coded_profile(image: np.ndarray, coded_axis: str) -> np.ndarray:
    """Patterns are constant across the non-coded axis; take one line."""
    return image[0, :] if coded_axis == VERTICAL else image[:, 0]


def render_stack(
    scene: SceneSpec,
    pattern_set: PatternSet,
    calib: CalibrationModel,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    ambient: float = DEFAULT_AMBIENT,
) -> ImageStack:
    """Render the full projection sequence as seen by the camera.

    Pixel intensity is clip(ambient + albedo * pattern_sample, 0, 1), with
    optional additive Gaussian noise (clipped again).  Shadowed pixels and
    pixels outside the projector frustum receive ambient light only; albedo
    above 1 drives highlights into saturation just like a glossy platter.

    Args:
        noise_sigma: standard deviation of the additive noise.
        rng: noise stream; required when noise_sigma > 0.
    """
    params = pattern_set.params
    expected = VERTICAL if calib.coded_axis == VERTICAL else HORIZONTAL
    if params.orientation != expected:
        raise ParameterError(
            f"pattern orientation {params.orientation!r} does not match "
            f"calibration coded axis {calib.coded_axis!r}"
        )
    if abs(params.fringe_period - calib.fringe_period) > 1e-9:
        raise ParameterError(
            f"pattern fringe period {params.fringe_period} differs from "
            f"calibration fringe period {calib.fringe_period}"
        )
    if noise_sigma > 0 and rng is None:
        raise ParameterError("noise requested without an rng stream")

    albedo, coded = _illumination(
        scene, calib, (params.height, params.width))
    floor_idx = np.minimum(coded.astype(np.int64), params.coded_extent - 1)

    def shade(sample: np.ndarray) -> np.ndarray:
        img = np.clip(ambient + albedo * sample, 0.0, 1.0)
        if noise_sigma > 0:
            img = np.clip(img + rng.normal(0.0, noise_sigma, img.shape),
                          0.0, 1.0)
        return img

    angle = 2.0 * np.pi * coded / params.fringe_period
    phase_imgs = np.stack([
        shade(np.clip(0.5 + 0.5 * np.cos(angle + offset), 0.0, 1.0))
        for offset in params.phase_offsets()
    ])
    code_imgs = np.stack([
        shade(_coded_profile(img, calib.coded_axis)[floor_idx])
        for img in pattern_set.code
    ])
    white_img = shade(np.ones_like(albedo))
    return ImageStack(phase=phase_imgs, code=code_imgs, white=white_img,
                      fringe_period=params.fringe_period)


def render_white_image(
    scene: SceneSpec,
    calib: CalibrationModel,
    projector_shape: tuple[int, int],
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    ambient: float = DEFAULT_AMBIENT,
) -> np.ndarray:
    """Render only the full-on illumination image (dataset sweeps)."""
    if noise_sigma > 0 and rng is None:
        raise ParameterError("noise requested without an rng stream")
    albedo, _ = _illumination(scene, calib, projector_shape)
    img = np.clip(ambient + albedo, 0.0, 1.0)
    if noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, noise_sigma, img.shape), 0.0, 1.0)
    return img


def render_material_masks(scene: SceneSpec) -> list[np.ndarray]:
    """Binary mask per material slot, k = 1..K; pairwise disjoint."""
    return [scene.material_index == k
            for k in range(1, scene.num_materials + 1)]


def rotate_scene(scene: SceneSpec, delta_theta: float) -> SceneSpec:
    """Rotate every scene map about the image centre by delta_theta degrees.

    Positive angles rotate counter-clockwise in the image.  Multiples of 90
    degrees are exact array permutations; other angles resample (bilinear
    for height and albedo, nearest for index and shadow maps).
    """
    delta = float(delta_theta) % 360.0
    if delta == 0.0:
        return replace(scene, height_field=scene.height_field.copy(),
                       albedo=scene.albedo.copy(),
                       material_index=scene.material_index.copy(),
                       instance_index=scene.instance_index.copy(),
                       shadow=scene.shadow.copy())
    if delta % 90.0 == 0.0 and scene.height == scene.width:
        k = int(delta // 90)
        rot = lambda a: np.ascontiguousarray(np.rot90(a, k))
        return replace(
            scene,
            height_field=rot(scene.height_field),
            albedo=rot(scene.albedo),
            material_index=rot(scene.material_index),
            instance_index=rot(scene.instance_index),
            shadow=rot(scene.shadow),
            pose_theta=(scene.pose_theta + delta_theta) % 360.0,
        )

    centre = ((scene.width - 1) / 2.0, (scene.height - 1) / 2.0)
    # cv2's positive angle is counter-clockwise, matching np.rot90.
    matrix = cv2.getRotationMatrix2D(centre, delta, 1.0)
    size = (scene.width, scene.height)

    def warp(a: np.ndarray, interp: int, border: int,
             fill: float = 0.0) -> np.ndarray:
        return cv2.warpAffine(a, matrix, size, flags=interp,
                              borderMode=border, borderValue=fill)

    height = warp(scene.height_field, cv2.INTER_LINEAR, cv2.BORDER_REPLICATE)
    albedo = warp(scene.albedo, cv2.INTER_LINEAR, cv2.BORDER_REPLICATE)
    material = warp(scene.material_index.astype(np.int32), cv2.INTER_NEAREST,
                    cv2.BORDER_CONSTANT, 0)
    instance = warp(scene.instance_index.astype(np.int32), cv2.INTER_NEAREST,
                    cv2.BORDER_CONSTANT, 0)
    shadow = warp(scene.shadow.astype(np.uint8), cv2.INTER_NEAREST,
                  cv2.BORDER_CONSTANT, 0).astype(bool)
    return replace(
        scene, height_field=height, albedo=albedo,
        material_index=material.astype(scene.material_index.dtype),
        instance_index=instance.astype(scene.instance_index.dtype),
        shadow=shadow,
        pose_theta=(scene.pose_theta + delta_theta) % 360.0,
    )


def randomize_materials(
    scene: SceneSpec,
    rng: np.random.Generator,
    rand: MaterialRandomization = MaterialRandomization(),
) -> tuple[SceneSpec, dict[int, dict[str, float]]]:
    """Jitter per-material appearance; returns (new scene, drawn parameters).

    Brightness scales the albedo directly.  Roughness tames glossy materials:
    an albedo g > 1 becomes 1 + (g - 1) * (1 - roughness) before brightness,
    so rough surfaces saturate less.
    """
    k = scene.num_materials
    roughness = rng.uniform(*rand.roughness_range, size=k)
    brightness = rng.uniform(*rand.brightness_range, size=k)
    rough_lut = np.concatenate([[0.0], roughness])
    bright_lut = np.concatenate([[1.0], brightness])

    base = scene.albedo
    rough = rough_lut[scene.material_index]
    glossy = base > 1.0
    tamed = np.where(glossy, 1.0 + (base - 1.0) * (1.0 - rough), base)
    albedo = tamed * bright_lut[scene.material_index]

    params = {
        mat: {"roughness": float(roughness[mat - 1]),
              "brightness": float(brightness[mat - 1])}
        for mat in range(1, k + 1)
    }
    return replace(scene, albedo=albedo), params


def _theta_stem(theta: float) -> str:
    return f"{theta:g}"


def _orientation_rng(rng_seed: int, theta: float) -> np.random.Generator:
    # One independent, reproducible stream per (seed, orientation).
    return np.random.default_rng([rng_seed, int(round(theta * 1000))])


def generate_dataset(
    scene: SceneSpec,
    calib: CalibrationModel,
    projector_shape: tuple[int, int],
    out_dir: str | Path,
    theta_max: float = 359.0,
    delta_theta: float = 1.0,
    rng_seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    randomization: MaterialRandomization = MaterialRandomization(),
    force: bool = False,
    n_threads: int = 1,
    scene_name: str = "scene",
) -> dict:
    """Sweep the scene through a full in-plane rotation and write a dataset.

    For every orientation theta = 0, delta, 2*delta, ... <= theta_max the
    base scene is rotated (always from the base pose, never cumulatively),
    material appearance is re-drawn from a stream keyed by (rng_seed, theta),
    and three artefacts are written:

        images/<theta>.png          illuminated view, 8-bit grayscale
        masks/mat_<k>_<theta>.png   one binary mask per material slot
        depth/<theta>.f32           ground-truth depth, raw float32 + sidecar

    plus a manifest.json describing every entry.  Rerunning with the same
    seed writes bit-identical artefacts.

    Raises:
        OutputExistsError: out_dir exists and is non-empty, unless force.
    """
    if delta_theta <= 0:
        raise ParameterError("delta_theta must be positive")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise OutputExistsError(
            f"{out_dir} is not empty; pass force=True to overwrite")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    (out_dir / "depth").mkdir(exist_ok=True)

    count = int(np.floor(theta_max / delta_theta)) + 1
    thetas = [i * delta_theta for i in range(count)]

    def one_orientation(theta: float) -> dict:
        stem = _theta_stem(theta)
        rng = _orientation_rng(rng_seed, theta)
        rotated = rotate_scene(scene, theta)
        randomized, materials = randomize_materials(rotated, rng,
                                                    randomization)
        image = render_white_image(randomized, calib, projector_shape,
                                   noise_sigma=noise_sigma, rng=rng)
        write_gray_image(out_dir / "images" / f"{stem}.png", image)
        mask_names = []
        for k, mask in enumerate(render_material_masks(rotated), start=1):
            name = f"mat_{k}_{stem}.png"
            write_mask_image(out_dir / "masks" / name, mask)
            mask_names.append(name)
        write_f32_plane(out_dir / "depth" / f"{stem}.f32",
                        rotated.height_field)
        return {
            "theta": theta,
            "image": f"images/{stem}.png",
            "masks": [f"masks/{n}" for n in mask_names],
            "depth": f"depth/{stem}.f32",
            "materials": {str(k): v for k, v in materials.items()},
        }

    if n_threads <= 1:
        entries = [one_orientation(t) for t in thetas]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            entries = list(pool.map(one_orientation, thetas))
    logger.info("dataset sweep complete: %d orientations -> %s",
                len(entries), out_dir)

    manifest = {
        "schema_version": 1,
        "kind": "rotation_sweep",
        "scene": scene_name,
        "rng_seed": rng_seed,
        "noise_sigma": noise_sigma,
        "theta_max": theta_max,
        "delta_theta": delta_theta,
        "width": scene.width,
        "height": scene.height,
        "num_materials": scene.num_materials,
        "count": len(entries),
        "entries": entries,
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest
