"""Calibration and triangulation tests.

The triangulation oracle is a plain forward projection written out in the
conftest with explicit matrix algebra: choose a depth field, compute the true
projector column per pixel, hand the equivalent absolute phase to the solver,
and demand the depth field back.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import (fit_sphere, make_default_calib,
                      projector_column_for_depth)
from fppkit import geometry as geo
from fppkit.errors import CalibrationError, ParameterError
from fppkit.phase import AbsolutePhaseMap


def phase_map_for_depth(calib, z):
    """Build the exact absolute-phase measurement for a depth field."""
    height, width = z.shape
    col = projector_column_for_depth(calib, z, height, width)
    absolute = 2.0 * np.pi * col / calib.fringe_period
    return AbsolutePhaseMap(
        absolute=absolute,
        fringe_order=np.floor(col / calib.fringe_period).astype(np.int32),
        valid=np.ones_like(absolute, dtype=bool),
    )


# ---------------------------------------------------------------------------
# CalibrationModel validation
# ---------------------------------------------------------------------------

def test_valid_model_accepted(default_calib):
    assert default_calib.projector_matrix.shape == (3, 4)


def test_non_orthonormal_rotation_rejected():
    r = np.eye(3)
    r[0, 1] = 1e-3
    with pytest.raises(CalibrationError, match="orthonormal"):
        geo.CalibrationModel(
            camera_intrinsics=np.diag([800.0, 800.0, 1.0]),
            projector_intrinsics=np.diag([700.0, 700.0, 1.0]),
            projector_rotation=r,
            projector_translation=np.zeros(3),
            fringe_period=24.0,
        )


def test_tiny_rotation_error_tolerated():
    r = np.eye(3)
    r[0, 1] = 1e-8
    geo.CalibrationModel(
        camera_intrinsics=np.diag([800.0, 800.0, 1.0]),
        projector_intrinsics=np.diag([700.0, 700.0, 1.0]),
        projector_rotation=r,
        projector_translation=np.zeros(3),
        fringe_period=24.0,
    )


def test_left_handed_rotation_rejected():
    r = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(CalibrationError, match="right-handed"):
        geo.CalibrationModel(
            camera_intrinsics=np.diag([800.0, 800.0, 1.0]),
            projector_intrinsics=np.diag([700.0, 700.0, 1.0]),
            projector_rotation=r,
            projector_translation=np.zeros(3),
            fringe_period=24.0,
        )


def test_lower_triangular_intrinsics_rejected():
    k = np.array([[800.0, 0.0, 128.0], [5.0, 800.0, 128.0], [0.0, 0.0, 1.0]])
    with pytest.raises(CalibrationError, match="upper triangular"):
        geo.CalibrationModel(
            camera_intrinsics=k,
            projector_intrinsics=np.diag([700.0, 700.0, 1.0]),
            projector_rotation=np.eye(3),
            projector_translation=np.zeros(3),
            fringe_period=24.0,
        )


# ---------------------------------------------------------------------------
# Calibration file I/O
# ---------------------------------------------------------------------------

def test_calibration_roundtrip(tmp_path, default_calib):
    path = tmp_path / "calib.json"
    geo.save_calibration(default_calib, path)
    loaded = geo.load_calibration(path)
    np.testing.assert_array_equal(loaded.camera_intrinsics,
                                  default_calib.camera_intrinsics)
    np.testing.assert_array_equal(loaded.projector_rotation,
                                  default_calib.projector_rotation)
    np.testing.assert_array_equal(loaded.projector_translation,
                                  default_calib.projector_translation)
    assert loaded.fringe_period == default_calib.fringe_period
    assert loaded.coded_axis == default_calib.coded_axis


def test_load_missing_field_named(tmp_path, default_calib):
    path = tmp_path / "calib.json"
    geo.save_calibration(default_calib, path)
    payload = json.loads(path.read_text())
    del payload["projector"]["rotation"]
    path.write_text(json.dumps(payload))
    with pytest.raises(CalibrationError, match="rotation"):
        geo.load_calibration(path)


def test_load_wrong_units(tmp_path, default_calib):
    path = tmp_path / "calib.json"
    geo.save_calibration(default_calib, path)
    path.write_text(path.read_text().replace('"units": "mm"', '"units": "m"'))
    with pytest.raises(CalibrationError, match="units"):
        geo.load_calibration(path)


def test_load_nonzero_distortion_rejected(tmp_path, default_calib):
    path = tmp_path / "calib.json"
    geo.save_calibration(default_calib, path)
    payload = json.loads(path.read_text())
    payload["camera"]["distortion"] = [0.1, 0, 0, 0, 0]
    path.write_text(json.dumps(payload))
    with pytest.raises(CalibrationError, match="distortion"):
        geo.load_calibration(path)


def test_load_unparsable_file(tmp_path):
    path = tmp_path / "calib.json"
    path.write_text("{not json")
    with pytest.raises(CalibrationError, match="parse"):
        geo.load_calibration(path)


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def test_flat_plane_recovered_exactly(default_calib):
    z_true = np.full((64, 64), 500.0)
    frame = geo.triangulate(phase_map_for_depth(default_calib, z_true),
                            default_calib)
    assert frame.valid.all()
    np.testing.assert_allclose(frame.z, z_true, atol=1e-9)
    np.testing.assert_allclose(frame.world_xyz[..., 2], z_true, atol=1e-9)


def test_tilted_plane_recovered_exactly(default_calib):
    uu, vv = np.meshgrid(np.arange(64), np.arange(64))
    z_true = 450.0 + 0.8 * uu + 0.3 * vv
    frame = geo.triangulate(phase_map_for_depth(default_calib, z_true),
                            default_calib)
    assert frame.valid.all()
    np.testing.assert_allclose(frame.z, z_true, atol=1e-8)


def test_sphere_cap_radius_recovered(default_calib):
    # True world-space sphere sampled by ray intersection per pixel.
    radius, size = 40.0, 96
    centre = np.array([-50.0, -50.0, 520.0])  # in view of the top-left crop
    k_inv = np.linalg.inv(default_calib.camera_intrinsics)
    uu, vv = np.meshgrid(np.arange(size, dtype=float),
                         np.arange(size, dtype=float))
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ k_inv.T
    b = rays @ centre
    c = centre @ centre - radius**2
    disc = b**2 - (rays * rays).sum(-1) * c
    cap = disc > 1.0  # skip grazing rays
    z_true = np.full((size, size), 560.0)
    t = (b[cap] - np.sqrt(disc[cap])) / (rays[cap] ** 2).sum(-1)
    z_true[cap] = t * rays[cap][:, 2]
    frame = geo.triangulate(phase_map_for_depth(default_calib, z_true),
                            default_calib)
    pts = frame.world_xyz[cap & frame.valid]
    fitted_centre, fitted = fit_sphere(pts)
    assert abs(fitted - radius) < 0.01
    np.testing.assert_allclose(fitted_centre, centre, atol=0.01)


def test_backprojection_consistency(default_calib):
    z_true = 400.0 + 30.0 * np.random.default_rng(3).random((32, 32))
    pm = phase_map_for_depth(default_calib, z_true)
    frame = geo.triangulate(pm, default_calib)
    col = projector_column_for_depth(default_calib, frame.z, 32, 32)
    col_from_phase = pm.absolute * default_calib.fringe_period / (2 * np.pi)
    np.testing.assert_allclose(col, col_from_phase, atol=0.01)


def test_out_of_volume_depths_invalid(default_calib):
    z_true = np.full((16, 16), 500.0)
    z_true[0, 0] = 50.0  # closer than z_min
    z_true[0, 1] = 2500.0  # farther than z_max
    frame = geo.triangulate(phase_map_for_depth(default_calib, z_true),
                            default_calib)
    assert not frame.valid[0, 0]
    assert not frame.valid[0, 1]
    assert frame.valid[5:, :].all()
    assert np.isnan(frame.z[0, 0])


def test_invalid_phase_stays_invalid(default_calib):
    z_true = np.full((8, 8), 500.0)
    pm = phase_map_for_depth(default_calib, z_true)
    pm.valid[3, 3] = False
    frame = geo.triangulate(pm, default_calib)
    assert not frame.valid[3, 3]


def test_near_parallel_ray_marked_invalid(default_calib):
    # Choose the projector column whose constraint plane contains the ray.
    z_true = np.full((4, 4), 500.0)
    pm = phase_map_for_depth(default_calib, z_true)
    k = default_calib.camera_intrinsics
    kp = default_calib.projector_intrinsics
    dx = (0 - k[0, 2]) / k[0, 0]  # pixel u=0 ray slope
    degenerate_col = kp[0, 2] + kp[0, 0] * dx
    pm.absolute[0, 0] = 2 * np.pi * degenerate_col / default_calib.fringe_period
    frame = geo.triangulate(pm, default_calib)
    assert not frame.valid[0, 0]
    assert frame.valid[1:, 1:].all()


def test_bad_working_volume_rejected(default_calib):
    pm = phase_map_for_depth(default_calib, np.full((4, 4), 500.0))
    with pytest.raises(ParameterError):
        geo.triangulate(pm, default_calib, z_min=800.0, z_max=200.0)


def test_camera_rays_satisfy_projection(default_calib):
    rays = geo.camera_rays(default_calib.camera_intrinsics, 8, 8)
    uu, vv = np.meshgrid(np.arange(8.0), np.arange(8.0))
    pix = rays @ default_calib.camera_intrinsics.T
    np.testing.assert_allclose(pix[..., 0], uu, atol=1e-12)
    np.testing.assert_allclose(pix[..., 1], vv, atol=1e-12)
    np.testing.assert_allclose(rays[..., 2], 1.0, atol=1e-12)


def test_phase_to_projector_coord_is_linear():
    phase = np.array([0.0, np.pi, 2 * np.pi])
    np.testing.assert_allclose(
        geo.phase_to_projector_coord(phase, 24.0), [0.0, 12.0, 24.0])
    with pytest.raises(ParameterError):
        geo.phase_to_projector_coord(phase, 0.0)


def test_rotated_rig_still_exact():
    angle = -0.15
    rot = np.array([
        [np.cos(angle), 0.0, np.sin(angle)],
        [0.0, 1.0, 0.0],
        [-np.sin(angle), 0.0, np.cos(angle)],
    ])
    calib = geo.CalibrationModel(
        camera_intrinsics=np.array(
            [[800.0, 0.0, 128.0], [0.0, 800.0, 128.0], [0.0, 0.0, 1.0]]),
        projector_intrinsics=np.array(
            [[700.0, 0.0, 456.0], [0.0, 700.0, 570.0], [0.0, 0.0, 1.0]]),
        projector_rotation=rot,
        projector_translation=rot @ np.array([200.0, 0.0, 0.0]),
        fringe_period=24.0,
    )
    z_true = np.full((32, 32), 500.0)
    frame = geo.triangulate(phase_map_for_depth(calib, z_true), calib)
    assert frame.valid.all()
    np.testing.assert_allclose(frame.z, z_true, atol=1e-8)
