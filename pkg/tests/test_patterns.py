"""Pattern generation tests.

The code-plane tests check against an independently constructed reflected
binary code table (recursive reflect-and-prefix), not against the bitwise
formula the implementation uses.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fppkit import patterns
from fppkit.errors import ParameterError
from fppkit.imageio import read_gray_image


def reflected_code_table(bits: int) -> list[int]:
    """Oracle: build the reflected binary code by list reflection."""
    codes = ["0", "1"]
    for _ in range(bits - 1):
        codes = ["0" + c for c in codes] + ["1" + c for c in reversed(codes)]
    return [int(c, 2) for c in codes]


def _params(**kw) -> patterns.PatternParams:
    defaults = dict(width=256, height=4, fringe_period=4.0, num_shifts=4,
                    num_code_bits=6)
    defaults.update(kw)
    return patterns.PatternParams(**defaults)


# ---------------------------------------------------------------------------
# Parameter validation
# ---------------------------------------------------------------------------

def test_too_few_shifts_rejected():
    with pytest.raises(ParameterError):
        _params(num_shifts=2)


def test_nonpositive_period_rejected():
    with pytest.raises(ParameterError):
        _params(fringe_period=0.0)


def test_insufficient_code_bits_rejected():
    # 2^2 periods of 4 px cover 16 px, short of a 256 px axis.
    with pytest.raises(ParameterError):
        _params(num_code_bits=2)


def test_unknown_orientation_rejected():
    with pytest.raises(ParameterError):
        _params(orientation="diagonal")


# ---------------------------------------------------------------------------
# Phase-shifted fringes
# ---------------------------------------------------------------------------

def test_phase_pattern_values_match_formula():
    p = _params(num_shifts=6)
    imgs = patterns.generate_phase_patterns(p)
    u = np.arange(p.width)
    for n in range(p.num_shifts):
        expected = 0.5 + 0.5 * np.cos(
            2 * np.pi * u / p.fringe_period + 2 * np.pi * n / p.num_shifts
        )
        np.testing.assert_allclose(imgs[n][0], expected, atol=1e-12)


def test_phase_patterns_shape_and_range():
    p = _params()
    imgs = patterns.generate_phase_patterns(p)
    assert imgs.shape == (p.num_shifts, p.height, p.width)
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_phase_patterns_average_to_half():
    # Sum of cos over a full set of evenly spaced offsets cancels.
    imgs = patterns.generate_phase_patterns(_params(num_shifts=18))
    np.testing.assert_allclose(imgs.mean(axis=0), 0.5, atol=1e-12)


def test_horizontal_orientation_varies_along_rows():
    p = _params(width=4, height=256, orientation="horizontal")
    imgs = patterns.generate_phase_patterns(p)
    assert np.ptp(imgs[0], axis=1).max() == 0.0  # constant along each row
    assert np.ptp(imgs[0], axis=0).max() > 0.5  # varies down the columns


# ---------------------------------------------------------------------------
# Code planes
# ---------------------------------------------------------------------------

def test_code_planes_match_reflect_and_prefix_oracle():
    p = _params()
    table = reflected_code_table(p.num_code_bits)
    planes = patterns.generate_code_patterns(p)
    for u in range(p.width):
        period = int(u // p.fringe_period)
        read = 0
        for b in range(p.num_code_bits):
            read = (read << 1) | int(planes[b, 0, u] > 0.5)
        assert read == table[period], f"column {u}"


def test_first_period_is_all_dark():
    planes = patterns.generate_code_patterns(_params())
    assert not planes[:, :, 0].any()


def test_period_three_reads_000010():
    # Period 3 carries reflected code 2 -> plane sequence 0,0,0,0,1,0.
    p = _params()
    planes = patterns.generate_code_patterns(p)
    u = int(3 * p.fringe_period)
    bits = [int(planes[b, 0, u] > 0.5) for b in range(p.num_code_bits)]
    assert bits == [0, 0, 0, 0, 1, 0]


def test_adjacent_periods_differ_in_exactly_one_bit():
    codes = patterns.code_values(_params(width=256, fringe_period=4.0))
    per_period = codes[:: 4]
    for a, b in zip(per_period[:-1], per_period[1:]):
        assert bin(int(a) ^ int(b)).count("1") == 1


@given(
    period=st.floats(min_value=1.0, max_value=32.0),
    extent=st.integers(min_value=2, max_value=512),
)
@settings(max_examples=50, deadline=None)
def test_code_transitions_always_single_bit(period, extent):
    bits_needed = int(np.ceil(np.log2(max(extent / period, 1.0)))) + 1
    p = patterns.PatternParams(
        width=extent, height=1, fringe_period=period, num_shifts=3,
        num_code_bits=bits_needed,
    )
    codes = patterns.code_values(p)
    diffs = codes[:-1] ^ codes[1:]
    changed = diffs[diffs != 0]
    # Every change flips exactly one bit (values are powers of two).
    assert np.all((changed & (changed - 1)) == 0)


# ---------------------------------------------------------------------------
# Binary defocus
# ---------------------------------------------------------------------------

def test_defocus_first_harmonic_near_ideal_fringe():
    # A blurred binary stripe should carry roughly the same fundamental
    # as the ideal sinusoid (amplitude 0.5); Fourier oracle via FFT.
    period, width = 36.0, 720
    p = patterns.PatternParams(width=width, height=2, fringe_period=period,
                               num_shifts=3, num_code_bits=5)
    fringe = patterns.generate_phase_patterns(p)[0]
    blurred = patterns.binary_defocus(fringe, kernel_radius=9)
    spectrum = np.fft.rfft(blurred[0])
    fundamental = 2.0 * np.abs(spectrum[int(width / period)]) / width
    assert abs(fundamental - 0.5) < 0.2 * 0.5


def test_defocus_zero_radius_is_pure_binary():
    p = _params()
    fringe = patterns.generate_phase_patterns(p)[0]
    out = patterns.binary_defocus(fringe, kernel_radius=0)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_defocus_constant_pattern_stays_uniform():
    out = patterns.binary_defocus(np.full((4, 64), 0.7), kernel_radius=5)
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_defocus_negative_radius_rejected():
    with pytest.raises(ParameterError):
        patterns.binary_defocus(np.zeros((2, 2)), kernel_radius=-1)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def test_export_writes_all_images_and_manifest(tmp_path):
    p = _params(num_shifts=4)
    ps = patterns.generate_pattern_set(p)
    written = patterns.export_pattern_set(ps, tmp_path)
    assert len(written) == p.num_shifts + p.num_code_bits + 1
    assert (tmp_path / "manifest.json").exists()
    for path in written:
        assert path.exists()


def test_export_roundtrip_within_quantization(tmp_path):
    p = _params(num_shifts=4)
    ps = patterns.generate_pattern_set(p)
    patterns.export_pattern_set(ps, tmp_path, bit_depth=16)
    img, depth = read_gray_image(tmp_path / "phase_01.png")
    assert depth == 16
    np.testing.assert_allclose(img, ps.phase[1], atol=1.0 / 65535)


def test_pattern_set_count():
    ps = patterns.generate_pattern_set(_params(num_shifts=5))
    assert ps.count == 5 + 6 + 1
