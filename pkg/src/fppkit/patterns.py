"""Projector pattern generation: phase-shifted fringes and binary code planes.

A pattern set consists of N quasi-sinusoidal fringe images, G binary code
planes, and one full-white image.  Fringes encode position along one projector
axis (the coded axis) as phase; the code planes disambiguate the fringe period
with a reflected binary code so the phase can be unwrapped per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ParameterError
from .imageio import write_gray_image, write_json

VERTICAL = "vertical"
HORIZONTAL = "horizontal"


@dataclass(frozen=True)
class PatternParams:
    """Geometry of one projector pattern set.

    Args:
        width: projector width in pixels.
        height: projector height in pixels.
        fringe_period: pixels per fringe period along the coded axis.
        num_shifts: number of phase-shifted fringe images (N >= 3).
        num_code_bits: number of binary code planes (G >= 1).
        orientation: "vertical" for fringes varying along columns,
            "horizontal" for fringes varying along rows.
    """

    width: int
    height: int
    fringe_period: float = 24.0
    num_shifts: int = 18
    num_code_bits: int = 6
    orientation: str = VERTICAL

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ParameterError("pattern dimensions must be positive")
        if self.num_shifts < 3:
            raise ParameterError(
                f"phase shifting needs at least 3 steps, got {self.num_shifts}"
            )
        if not self.fringe_period > 0:
            raise ParameterError("fringe period must be positive")
        if self.num_code_bits < 1:
            raise ParameterError("at least one code plane is required")
        if self.orientation not in (VERTICAL, HORIZONTAL):
            raise ParameterError(f"unknown orientation {self.orientation!r}")
        if (1 << self.num_code_bits) * self.fringe_period < self.coded_extent:
            raise ParameterError(
                "code planes cannot address the full coded axis: "
                f"2^{self.num_code_bits} periods of {self.fringe_period}px "
                f"< {self.coded_extent}px"
            )

    @property
    def coded_extent(self) -> int:
        """Length of the coded axis in projector pixels."""
        return self.width if self.orientation == VERTICAL else self.height

    def phase_offsets(self) -> np.ndarray:
        """Evenly spaced shift offsets, 2*pi*(n-1)/N for n = 1..N."""
        return 2.0 * np.pi * np.arange(self.num_shifts) / self.num_shifts


def _broadcast_profile(params: PatternParams, profile: np.ndarray) -> np.ndarray:
    """Expand a 1-D coded-axis profile to the full pattern image."""
    if params.orientation == VERTICAL:
        return np.broadcast_to(profile, (params.height, params.width)).copy()
    return np.broadcast_to(profile[:, None], (params.height, params.width)).copy()


def generate_phase_patterns(params: PatternParams) -> np.ndarray:
    """Generate the N phase-shifted fringe images.

    Pattern n (0-based) has value 0.5 + 0.5*cos(2*pi*u/T + 2*pi*n/N) at coded
    coordinate u, so an ideal diffuse surface reflects a unit-amplitude
    sinusoid with mean and modulation both 0.5.

    Returns:
        Array of shape (N, height, width) with values in [0, 1].
    """
    u = np.arange(params.coded_extent, dtype=np.float64)
    base = 2.0 * np.pi * u / params.fringe_period
    out = np.empty((params.num_shifts, params.height, params.width))
    for n, delta in enumerate(params.phase_offsets()):
        profile = 0.5 + 0.5 * np.cos(base + delta)
        out[n] = _broadcast_profile(params, profile)
    return np.clip(out, 0.0, 1.0)


def code_values(params: PatternParams) -> np.ndarray:
    """Reflected binary code value for each coded-axis pixel.

    Pixel u belongs to fringe period k = floor(u / T) and carries code
    k XOR (k >> 1), which changes by exactly one bit between neighbours.
    """
    u = np.arange(params.coded_extent)
    k = (u / params.fringe_period).astype(np.int64)
    return k ^ (k >> 1)


def generate_code_patterns(params: PatternParams) -> np.ndarray:
    """Generate the G binary code planes.

    Plane b holds bit (G-1-b) of the period code, i.e. plane 0 is the most
    significant bit.

    Returns:
        Array of shape (G, height, width) with values in {0.0, 1.0}.
    """
    codes = code_values(params)
    out = np.empty((params.num_code_bits, params.height, params.width))
    for b in range(params.num_code_bits):
        bit = (codes >> (params.num_code_bits - 1 - b)) & 1
        out[b] = _broadcast_profile(params, bit.astype(np.float64))
    return out


def generate_white_pattern(params: PatternParams) -> np.ndarray:
    """Full-on illumination image used for texture and thresholding."""
    return np.ones((params.height, params.width))


def binary_defocus(pattern: np.ndarray, kernel_radius: int, axis: int = 1) -> np.ndarray:
    """Binarize a pattern and low-pass it along the coded axis.

    Thresholds at 0.5, then applies a Gaussian blur of sigma = radius / 2
    truncated at the radius.  Models a defocused projector turning a binary
    stripe pattern into a quasi-sinusoid.  radius 0 skips the blur.

    Args:
        pattern: 2-D image with values in [0, 1].
        kernel_radius: blur half-width in pixels, >= 0.
        axis: image axis of the coded direction (1 = columns).

    Returns:
        Image in [0, 1], same shape as the input.
    """
    if kernel_radius < 0:
        raise ParameterError("kernel radius must be >= 0")
    binary = (np.asarray(pattern, dtype=np.float64) >= 0.5).astype(np.float64)
    if kernel_radius == 0:
        return binary
    sigma = kernel_radius / 2.0
    return gaussian_filter1d(binary, sigma, axis=axis, mode="nearest", truncate=2.0)


@dataclass(frozen=True)
class PatternSet:
    """One complete projection sequence plus its generation parameters."""

    params: PatternParams
    phase: np.ndarray  # (N, H, W)
    code: np.ndarray  # (G, H, W)
    white: np.ndarray  # (H, W)

    @property
    def count(self) -> int:
        return self.phase.shape[0] + self.code.shape[0] + 1


def generate_pattern_set(params: PatternParams, defocus_radius: int = 0) -> PatternSet:
    """Generate fringes, code planes, and the white image in one call."""
    phase = generate_phase_patterns(params)
    if defocus_radius > 0:
        axis = 1 if params.orientation == VERTICAL else 0
        phase = np.stack(
            [binary_defocus(img, defocus_radius, axis=axis) for img in phase]
        )
    return PatternSet(
        params=params,
        phase=phase,
        code=generate_code_patterns(params),
        white=generate_white_pattern(params),
    )


def export_pattern_set(pattern_set: PatternSet, out_dir: str | Path,
                       bit_depth: int = 8) -> list[Path]:
    """Write every pattern as a grayscale PNG plus a manifest.

    Files are named phase_NN.png, code_NN.png, and white.png.

    Returns:
        The list of written image paths, in projection order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for n, img in enumerate(pattern_set.phase):
        path = out_dir / f"phase_{n:02d}.png"
        write_gray_image(path, img, bit_depth)
        written.append(path)
    for b, img in enumerate(pattern_set.code):
        path = out_dir / f"code_{b:02d}.png"
        write_gray_image(path, img, bit_depth)
        written.append(path)
    white_path = out_dir / "white.png"
    write_gray_image(white_path, pattern_set.white, bit_depth)
    written.append(white_path)

    params = pattern_set.params
    write_json(out_dir / "manifest.json", {
        "schema_version": 1,
        "kind": "pattern_set",
        "width": params.width,
        "height": params.height,
        "fringe_period": params.fringe_period,
        "num_shifts": params.num_shifts,
        "num_code_bits": params.num_code_bits,
        "orientation": params.orientation,
        "bit_depth": bit_depth,
        "files": [p.name for p in written],
    })
    return written
