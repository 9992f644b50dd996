"""Point cloud export: binary little-endian PLY with optional labels.

Vertices carry float32 x/y/z in millimetres.  When labels are provided each
vertex additionally carries a uint8 class id (255 = unlabeled) and an RGB
colour looked up from a palette, so the files preview correctly in standard
viewers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError, StackFormatError
from .geometry import DepthFrame
from .imageio import atomic_write

UNLABELED = 255

# One distinct colour per class id; anything unknown renders mid-gray.
DEFAULT_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (31, 119, 180),
    1: (255, 127, 14),
    2: (44, 160, 44),
    3: (214, 39, 40),
    4: (148, 103, 189),
    5: (140, 86, 75),
    6: (227, 119, 194),
    7: (127, 127, 127),
    8: (188, 189, 34),
    9: (23, 190, 207),
    10: (255, 215, 0),
    UNLABELED: (128, 128, 128),
}


def write_ply(path: str | Path, points: np.ndarray,
              labels: np.ndarray | None = None,
              palette: dict[int, tuple[int, int, int]] | None = None) -> int:
    """Write an (M, 3) point array as binary PLY; returns the vertex count."""
    points = np.asarray(points, dtype="<f4")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ParameterError(f"points must be (M, 3), got {points.shape}")
    m = points.shape[0]

    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {m}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
        if labels.shape[0] != m:
            raise ParameterError("labels length must match point count")
        header += [
            "property uchar label",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
        ]
        record = np.empty(
            m,
            dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                   ("label", "u1"), ("red", "u1"), ("green", "u1"),
                   ("blue", "u1")],
        )
        lut = palette if palette is not None else DEFAULT_PALETTE
        colors = np.array(
            [lut.get(i, lut.get(UNLABELED, (128, 128, 128)))
             for i in range(256)],
            dtype=np.uint8,
        )
        record["label"] = labels
        rgb = colors[labels]
        record["red"], record["green"], record["blue"] = (
            rgb[:, 0], rgb[:, 1], rgb[:, 2])
    else:
        record = np.empty(m, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    record["x"], record["y"], record["z"] = (
        points[:, 0], points[:, 1], points[:, 2])
    header.append("end_header")

    with atomic_write(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(record.tobytes())
    return m


def export_pointcloud(frame: DepthFrame, path: str | Path,
                      labels: np.ndarray | None = None,
                      palette: dict[int, tuple[int, int, int]] | None = None,
                      ) -> int:
    """Export the valid pixels of a depth frame as a PLY point cloud.

    Args:
        frame: reconstruction result; only valid pixels are written.
        labels: optional (H, W) uint8 class image, 255 meaning unlabeled.

    Returns:
        Number of vertices written.
    """
    mask = frame.valid
    points = frame.world_xyz[mask]
    vertex_labels = None
    if labels is not None:
        if labels.shape != mask.shape:
            raise ParameterError("label image dimensions differ from frame")
        vertex_labels = np.asarray(labels, dtype=np.uint8)[mask]
    return write_ply(path, points, vertex_labels, palette)


_PROPERTY_TYPES = {"float": "<f4", "uchar": "u1"}


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a binary PLY written by :func:`write_ply`.

    Returns:
        (points, labels) where points is (M, 3) float32 and labels is an
        (M,) uint8 array or None when the file carries no label property.
    """
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise StackFormatError(f"{path}: not a PLY file")
    header_lines = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]

    count = 0
    fields: list[tuple[str, str]] = []
    for line in header_lines[1:]:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            continue
        if parts[0] == "comment":
            continue
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise StackFormatError(f"{path}: unsupported element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in _PROPERTY_TYPES:
                raise StackFormatError(
                    f"{path}: unsupported property type {parts[1]}")
            fields.append((parts[2], _PROPERTY_TYPES[parts[1]]))
        elif parts[0] == "format":
            raise StackFormatError(f"{path}: not binary little-endian")

    record = np.frombuffer(body, dtype=np.dtype(fields), count=count)
    points = np.stack([record["x"], record["y"], record["z"]], axis=1)
    labels = record["label"].copy() if "label" in record.dtype.names else None
    return points, labels
