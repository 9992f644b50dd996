"""Procedural test scenes: canonical shapes and both faces of a hard drive.

All scenes sit around a 500 mm working distance.  Height fields store the
distance from the camera, so raised components have *smaller* values than
the surface they sit on.  Material indices follow the component taxonomy
(material k labels class id k - 1, 0 is background).
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .geometry import CalibrationModel, camera_rays
from .simulator import SceneSpec

# Material slot per component class (class id + 1).
MAT_PLATTER = 1
MAT_SPINDLE_HUB = 2
MAT_TOP_PLATE = 3
MAT_HEAD = 4
MAT_BEARING = 5
MAT_LANDING_TRAY = 6
MAT_PCB = 7
MAT_MAGNET = 8
MAT_SATA = 9
MAT_SATA_POWER = 10
MAT_SCREW = 11
NUM_MATERIALS = 11

WORKING_DISTANCE = 500.0


def default_calibration(width: int = 512, height: int | None = None,
                        fringe_period: float = 24.0) -> CalibrationModel:
    """A plausible structured-light rig centred on the given image size.

    The projector sits 150 mm to the camera's left with parallel axes; its
    912x1140 panel covers the camera field of view at the working distance.
    """
    height = width if height is None else height
    cam = np.array([[800.0, 0.0, width / 2.0],
                    [0.0, 800.0, height / 2.0],
                    [0.0, 0.0, 1.0]])
    proj = np.array([[700.0, 0.0, 456.0],
                     [0.0, 700.0, 570.0],
                     [0.0, 0.0, 1.0]])
    return CalibrationModel(
        camera_intrinsics=cam,
        projector_intrinsics=proj,
        projector_rotation=np.eye(3),
        projector_translation=np.array([150.0, 0.0, 0.0]),
        fringe_period=fringe_period,
    )


class _Canvas:
    """Mutable scene maps with paint helpers; later paints overwrite."""

    def __init__(self, size: int, z_background: float,
                 background_albedo: float) -> None:
        self.height = np.full((size, size), z_background, dtype=np.float64)
        self.albedo = np.full((size, size), background_albedo,
                              dtype=np.float64)
        self.material = np.zeros((size, size), dtype=np.int32)
        self.instance = np.zeros((size, size), dtype=np.int32)
        self.shadow = np.zeros((size, size), dtype=bool)
        self._next_instance = 1
        yy, xx = np.mgrid[0:size, 0:size]
        self._yy = yy
        self._xx = xx

    def disk(self, cy: float, cx: float, r: float) -> np.ndarray:
        return (self._yy - cy) ** 2 + (self._xx - cx) ** 2 <= r * r

    def rect(self, y0: float, y1: float, x0: float, x1: float) -> np.ndarray:
        return ((self._yy >= y0) & (self._yy < y1)
                & (self._xx >= x0) & (self._xx < x1))

    def paint(self, region: np.ndarray, material: int, z: float,
              albedo: float) -> int:
        idx = self._next_instance
        self._next_instance += 1
        self.height[region] = z
        self.albedo[region] = albedo
        self.material[region] = material
        self.instance[region] = idx
        return idx

    def scene(self, num_materials: int = NUM_MATERIALS) -> SceneSpec:
        return SceneSpec(height_field=self.height, albedo=self.albedo,
                         material_index=self.material,
                         instance_index=self.instance, shadow=self.shadow,
                         num_materials=num_materials)


def plane_scene(calib: CalibrationModel | None = None, size: int = 256,
                z: float = WORKING_DISTANCE,
                albedo: float = 0.85) -> SceneSpec:
    """A fronto-parallel plane filling the frame."""
    canvas = _Canvas(size, z, albedo)
    canvas.paint(np.ones((size, size), dtype=bool), MAT_TOP_PLATE, z, albedo)
    return canvas.scene()


def ramp_scene(calib: CalibrationModel | None = None, size: int = 256,
               z_centre: float = WORKING_DISTANCE, z_span: float = 60.0,
               albedo: float = 0.85) -> SceneSpec:
    """Depth rises linearly across the columns by z_span millimetres."""
    canvas = _Canvas(size, z_centre, albedo)
    cols = (np.arange(size) - (size - 1) / 2.0) / (size - 1)
    canvas.paint(np.ones((size, size), dtype=bool), MAT_TOP_PLATE,
                 z_centre, albedo)
    canvas.height += cols[None, :] * z_span
    return canvas.scene()


def sphere_scene(calib: CalibrationModel, size: int = 256,
                 radius: float = 20.0,
                 centre: tuple[float, float, float] = (-30.0, -30.0, 525.0),
                 z_background: float = 540.0,
                 albedo: float = 0.85) -> SceneSpec:
    """A 40 mm ball in front of a backdrop plane, depth by ray intersection.

    The silhouette sits within half a fringe period of the backdrop, so
    period decisions at the occlusion stay locally decidable; surfaces with
    metre-scale relief are out of scope for a desk-mounted scanner anyway.
    """
    canvas = _Canvas(size, z_background, albedo)
    canvas.paint(np.ones((size, size), dtype=bool), MAT_TOP_PLATE,
                 z_background, albedo)
    rays = camera_rays(calib.camera_intrinsics, size, size)
    c = np.asarray(centre, dtype=np.float64)
    b = rays @ c
    norm2 = np.einsum("hwc,hwc->hw", rays, rays)
    disc = b * b - norm2 * (c @ c - radius * radius)
    hit = disc >= 0
    t = np.where(hit, (b - np.sqrt(np.where(hit, disc, 0.0))) / norm2,
                 np.inf)
    on_sphere = hit & (t > 0) & (t < z_background)
    canvas.paint(on_sphere, MAT_PLATTER, 0.0, albedo)
    canvas.height = np.where(on_sphere, t, z_background)
    return canvas.scene()


def _cast_shadow(canvas: _Canvas, occluder: np.ndarray,
                 shift_px: int) -> None:
    """Crude projector shadow: the occluder footprint shifted along +x.

    The projector sits at negative x, so raised parts shade the region to
    their right.  Only pixels lower than the occluder get shaded.
    """
    shadow = np.zeros_like(occluder)
    shadow[:, shift_px:] = occluder[:, :-shift_px]
    canvas.shadow |= shadow & ~occluder


def hdd_platter_scene(calib: CalibrationModel | None = None,
                      size: int = 512,
                      z_table: float = WORKING_DISTANCE + 8.0) -> SceneSpec:
    """Open drive seen from the platter side, glossy platter included."""
    calib = calib if calib is not None else default_calibration(size)
    z_body = z_table - 14.0          # top plate rim, 6 mm proud of the table
    f = calib.camera_intrinsics[0, 0]
    px = f / z_body                  # pixels per millimetre at the drive
    canvas = _Canvas(size, z_table, 0.30)
    cy = cx = (size - 1) / 2.0

    half_w, half_h = 51.0 * px, 73.5 * px       # 102 x 147 mm body
    body = canvas.rect(cy - half_h, cy + half_h, cx - half_w, cx + half_w)
    canvas.paint(body, MAT_TOP_PLATE, z_body, 0.55)

    platter_c = (cy - 22.0 * px, cx)
    platter = canvas.disk(*platter_c, 47.5 * px)
    canvas.paint(platter, MAT_PLATTER, z_body - 2.0, 4.0)

    hub = canvas.disk(*platter_c, 12.5 * px)
    canvas.paint(hub, MAT_SPINDLE_HUB, z_body - 3.0, 1.3)

    pivot = (cy + 40.0 * px, cx + 36.0 * px)
    arm = _arm_region(canvas, pivot, platter_c, 4.0 * px)
    canvas.paint(arm, MAT_HEAD, z_body - 5.0, 0.7)
    _cast_shadow(canvas, arm, max(2, int(round(2.0 * px))))

    bearing = canvas.disk(*pivot, 4.0 * px)
    canvas.paint(bearing, MAT_BEARING, z_body - 5.5, 0.9)

    magnet = canvas.rect(pivot[0] + 6.0 * px, pivot[0] + 20.0 * px,
                         pivot[1] - 9.0 * px, pivot[1] + 9.0 * px)
    canvas.paint(magnet, MAT_MAGNET, z_body - 4.0, 0.35)

    tray = canvas.rect(platter_c[0] - 8.0 * px, platter_c[0] + 8.0 * px,
                       cx + 38.0 * px, cx + 48.0 * px)
    canvas.paint(tray, MAT_LANDING_TRAY, z_body - 2.5, 0.6)

    for dy, dx in ((-6.25, 0.0), (6.25, 0.0), (0.0, -6.25), (0.0, 6.25)):
        screw = canvas.disk(platter_c[0] + dy * px, platter_c[1] + dx * px,
                            1.6 * px)
        canvas.paint(screw, MAT_SCREW, z_body - 3.5, 0.95)
    inset = 6.0 * px
    for sy in (cy - half_h + inset, cy + half_h - inset):
        for sx in (cx - half_w + inset, cx + half_w - inset):
            screw = canvas.disk(sy, sx, 1.6 * px)
            canvas.paint(screw, MAT_SCREW, z_body - 0.8, 0.95)
    return canvas.scene()


def _arm_region(canvas: _Canvas, pivot: tuple[float, float],
                tip_towards: tuple[float, float],
                half_width: float) -> np.ndarray:
    """Tapered quadrilateral from the pivot towards the platter centre."""
    py, px_ = pivot
    ty, tx = tip_towards
    direction = np.array([ty - py, tx - px_])
    direction = direction / np.linalg.norm(direction)
    tip = np.array([py, px_]) + direction * 0.75 * np.hypot(ty - py,
                                                            tx - px_)
    normal = np.array([-direction[1], direction[0]])
    rel = np.stack([canvas._yy - py, canvas._xx - px_], axis=-1)
    along = rel @ direction
    across = rel @ normal
    length = np.hypot(*(tip - np.array([py, px_])))
    taper = half_width * (1.0 - 0.5 * np.clip(along, 0, length) / length)
    return (along >= 0) & (along <= length) & (np.abs(across) <= taper)


def hdd_pcb_scene(calib: CalibrationModel | None = None,
                  size: int = 512,
                  z_table: float = WORKING_DISTANCE + 8.0) -> SceneSpec:
    """Drive flipped onto its face: controller board, connectors, screws."""
    calib = calib if calib is not None else default_calibration(size)
    z_body = z_table - 14.0
    f = calib.camera_intrinsics[0, 0]
    px = f / z_body
    canvas = _Canvas(size, z_table, 0.30)
    cy = cx = (size - 1) / 2.0

    half_w, half_h = 51.0 * px, 73.5 * px
    body = canvas.rect(cy - half_h, cy + half_h, cx - half_w, cx + half_w)
    canvas.paint(body, MAT_TOP_PLATE, z_body, 0.50)

    pcb = canvas.rect(cy - 10.0 * px, cy + half_h - 6.0 * px,
                      cx - half_w + 6.0 * px, cx + half_w - 6.0 * px)
    canvas.paint(pcb, MAT_PCB, z_body - 1.5, 0.45)

    conn_y0 = cy + half_h - 14.0 * px
    sata = canvas.rect(conn_y0, conn_y0 + 8.0 * px,
                       cx - half_w + 8.0 * px, cx - half_w + 22.0 * px)
    canvas.paint(sata, MAT_SATA, z_body - 2.5, 0.25)
    power = canvas.rect(conn_y0, conn_y0 + 8.0 * px,
                        cx - half_w + 26.0 * px, cx - half_w + 52.0 * px)
    canvas.paint(power, MAT_SATA_POWER, z_body - 2.5, 0.25)

    for dy, dx in ((-4.0, -38.0), (-4.0, 38.0), (30.0, -38.0), (30.0, 38.0)):
        screw = canvas.disk(cy + dy * px, cx + dx * px, 1.6 * px)
        canvas.paint(screw, MAT_SCREW, z_body - 2.0, 0.95)
    inset = 6.0 * px
    for sx in (cx - half_w + inset, cx + half_w - inset):
        screw = canvas.disk(cy - half_h + inset, sx, 1.6 * px)
        canvas.paint(screw, MAT_SCREW, z_body - 0.8, 0.95)
    return canvas.scene()


SCENE_BUILDERS = {
    "plane": plane_scene,
    "ramp": ramp_scene,
    "sphere": sphere_scene,
    "hdd-platter": hdd_platter_scene,
    "hdd-pcb": hdd_pcb_scene,
}


def build_scene(name: str, calib: CalibrationModel,
                size: int = 512) -> SceneSpec:
    """Look up a scene builder by name."""
    try:
        builder = SCENE_BUILDERS[name]
    except KeyError:
        options = ", ".join(sorted(SCENE_BUILDERS))
        raise ParameterError(f"unknown scene {name!r}; choose one of {options}")
    return builder(calib, size)
