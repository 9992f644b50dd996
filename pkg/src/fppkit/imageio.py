"""Small file I/O helpers: grayscale images, raw float planes, atomic writes.

All writers go through :func:`atomic_write` so a crashed process never leaves
a truncated file behind; the temp file lives in the destination directory and
is renamed into place only after a successful write.
"""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from .errors import StackFormatError

# Raw float planes are always little-endian float32, row-major.
F32_DTYPE = np.dtype("<f4")


@contextlib.contextmanager
def atomic_write(path: str | Path) -> Iterator[Path]:
    """Yield a temp path next to ``path``; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix + ".tmp")
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        with contextlib.suppress(FileNotFoundError):
            tmp_path.unlink()


def write_json(path: str | Path, payload: dict) -> None:
    with atomic_write(path) as tmp:
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def write_gray_image(path: str | Path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write a [0, 1] float image as an 8- or 16-bit grayscale PNG/PGM."""
    if bit_depth not in (8, 16):
        raise StackFormatError(f"unsupported bit depth {bit_depth}, expected 8 or 16")
    scale = (1 << bit_depth) - 1
    quantized = np.rint(np.clip(image, 0.0, 1.0) * scale)
    data = quantized.astype(np.uint8 if bit_depth == 8 else np.uint16)
    _imwrite(path, data)


def write_mask_image(path: str | Path, mask: np.ndarray) -> None:
    """Write a boolean mask as an 8-bit PNG with values {0, 255}."""
    _imwrite(path, np.where(mask, 255, 0).astype(np.uint8))


def _imwrite(path: str | Path, data: np.ndarray) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in (".png", ".pgm"):
        raise StackFormatError(f"unsupported image format: {path.name}")
    # Low compression: datasets are written in bulk and read back rarely.
    params = [cv2.IMWRITE_PNG_COMPRESSION, 1] if ext == ".png" else []
    ok, buf = cv2.imencode(ext, data, params)
    if not ok:
        raise StackFormatError(f"failed to encode {path.name}")
    with atomic_write(path) as tmp:
        tmp.write_bytes(buf.tobytes())


def read_gray_image(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a grayscale image; returns (float64 image in [0, 1], bit depth)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise StackFormatError(f"cannot read image: {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    if raw.dtype == np.uint8:
        bit_depth = 8
    elif raw.dtype == np.uint16:
        bit_depth = 16
    else:
        raise StackFormatError(f"unsupported pixel type {raw.dtype} in {path}")
    scale = (1 << bit_depth) - 1
    return raw.astype(np.float64) / scale, bit_depth


def read_mask_image(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise StackFormatError(f"cannot read image: {path}")
    if raw.ndim == 3:
        raw = raw[..., 0]
    return raw > 0


def write_f32_plane(path: str | Path, plane: np.ndarray, units: str = "mm") -> None:
    """Write a 2-D array as raw little-endian float32 plus a JSON sidecar."""
    plane = np.ascontiguousarray(plane, dtype=F32_DTYPE)
    if plane.ndim != 2:
        raise StackFormatError("raw float planes must be 2-D")
    with atomic_write(path) as tmp:
        tmp.write_bytes(plane.tobytes())
    write_json(
        Path(str(path) + ".json"),
        {
            "dtype": "f32le",
            "width": int(plane.shape[1]),
            "height": int(plane.shape[0]),
            "units": units,
        },
    )


def read_f32_plane(path: str | Path) -> np.ndarray:
    """Read a raw float32 plane using its JSON sidecar for the shape."""
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise StackFormatError(f"missing sidecar header: {meta_path}")
    meta = read_json(meta_path)
    if meta.get("dtype") != "f32le":
        raise StackFormatError(f"unsupported raw dtype {meta.get('dtype')!r}")
    width, height = int(meta["width"]), int(meta["height"])
    data = np.frombuffer(Path(path).read_bytes(), dtype=F32_DTYPE)
    if data.size != width * height:
        raise StackFormatError(
            f"{path}: expected {width * height} samples, found {data.size}"
        )
    return data.reshape(height, width).astype(np.float64)
