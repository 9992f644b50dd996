"""Instance annotations: flat-text polygon labels and mask geometry ops.

The label format is one instance per line, a class id followed by an even
number of normalized polygon coordinates:

    class_id x1 y1 x2 y2 ... xn yn

Polygons live in corner space: (0, 0) is the top-left image corner and
(1, 1) the bottom-right, so a pixel (r, c) spans
[c/W, (c+1)/W] x [r/H, (r+1)/H].  Mask tracing emits vertices on the pixel
lattice, which keeps axis-aligned shapes exactly rasterizable (pixel
centres never fall on lattice-aligned edges).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, LabelParseError, ParameterError
from .imageio import atomic_write

CATEGORY_MECHANICAL = "Mechanical & Moving"
CATEGORY_ELECTRONICS = "Electronics & Interfaces"
CATEGORY_FASTENERS = "Fasteners"

COORD_DECIMALS = 6
DEFAULT_MIN_AREA = 9
SIMPLIFY_TOLERANCE_PX = 0.5

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ComponentClass:
    id: int
    name: str
    category: str


@dataclass(frozen=True)
class Taxonomy:
    """The component classes the pipeline can label, with dense ids."""

    classes: tuple[ComponentClass, ...]

    def __post_init__(self) -> None:
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ParameterError("class ids must be dense and start at 0")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ParameterError("class names must be unique")

    def __len__(self) -> int:
        return len(self.classes)

    def name_of(self, class_id: int) -> str:
        return self.classes[class_id].name

    def id_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def fastener_ids(self) -> frozenset[int]:
        return frozenset(c.id for c in self.classes
                         if c.category == CATEGORY_FASTENERS)

    def save(self, path: str | Path) -> None:
        payload = [{"id": c.id, "name": c.name, "category": c.category}
                   for c in self.classes]
        with atomic_write(path) as tmp:
            tmp.write_text(json.dumps(payload, indent=2) + "\n",
                           encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Taxonomy":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = sorted(raw, key=lambda e: e["id"])
        return cls(tuple(ComponentClass(int(e["id"]), e["name"],
                                        e["category"]) for e in entries))


def _default_taxonomy() -> Taxonomy:
    mech = [(0, "Platter"), (1, "Spindle Motor Hub"), (2, "Top Plate"),
            (3, "Read-Write-Head"), (4, "Bearing"), (5, "Landing Tray")]
    elec = [(6, "PCB"), (7, "Magnet"), (8, "SATA Connector"),
            (9, "SATA Power Connector")]
    fast = [(10, "Screw")]
    classes = (
        [ComponentClass(i, n, CATEGORY_MECHANICAL) for i, n in mech]
        + [ComponentClass(i, n, CATEGORY_ELECTRONICS) for i, n in elec]
        + [ComponentClass(i, n, CATEGORY_FASTENERS) for i, n in fast]
    )
    return Taxonomy(tuple(classes))


DEFAULT_TAXONOMY = _default_taxonomy()


@dataclass
class Instance:
    """One labelled component: class, normalized polygon, confidence."""

    class_id: int
    polygon: np.ndarray
    confidence: float = 1.0

    def __post_init__(self) -> None:
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2:
            raise ParameterError("polygon must be an (n, 2) array")
        if self.polygon.shape[0] < 3:
            raise ParameterError("polygon needs at least 3 vertices")
        if self.polygon.min() < 0.0 or self.polygon.max() > 1.0:
            raise ParameterError("polygon coordinates must lie in [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ParameterError("confidence must lie in [0, 1]")

    def centroid(self) -> np.ndarray:
        """Area centroid; falls back to the vertex mean when degenerate."""
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        area2 = cross.sum()
        if abs(area2) < 1e-15:
            return self.polygon.mean(axis=0)
        cx = ((x + xn) * cross).sum() / (3.0 * area2)
        cy = ((y + yn) * cross).sum() / (3.0 * area2)
        return np.array([cx, cy])


@dataclass
class AnnotationSet:
    instances: list[Instance] = field(default_factory=list)
    image_width: int = 0
    image_height: int = 0


def parse_labels(text: str, width: int, height: int,
                 taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> AnnotationSet:
    """Parse flat-text polygon labels; errors carry the offending line."""
    instances = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            class_id = int(tokens[0])
        except ValueError:
            raise LabelParseError(f"class id {tokens[0]!r} is not an integer",
                                  line_no)
        if not 0 <= class_id < len(taxonomy):
            raise LabelParseError(
                f"class id {class_id} outside taxonomy [0, {len(taxonomy) - 1}]",
                line_no)
        try:
            coords = [float(t) for t in tokens[1:]]
        except ValueError:
            raise LabelParseError("malformed coordinate token", line_no)
        if len(coords) % 2 != 0:
            raise LabelParseError(
                f"odd coordinate count ({len(coords)})", line_no)
        if len(coords) < 6:
            raise LabelParseError(
                "polygon needs at least 3 vertex pairs", line_no)
        polygon = np.array(coords, dtype=np.float64).reshape(-1, 2)
        if polygon.min() < 0.0 or polygon.max() > 1.0:
            raise LabelParseError("coordinate outside [0, 1]", line_no)
        instances.append(Instance(class_id=class_id, polygon=polygon))
    return AnnotationSet(instances=instances, image_width=width,
                         image_height=height)


def serialize_labels(aset: AnnotationSet) -> str:
    """Inverse of parse_labels; coordinates fixed at 6 decimal places."""
    lines = []
    for inst in aset.instances:
        coords = " ".join(f"{v:.{COORD_DECIMALS}f}"
                          for v in inst.polygon.reshape(-1))
        lines.append(f"{inst.class_id} {coords}")
    return "\n".join(lines) + ("\n" if lines else "")


def load_labels(path: str | Path, width: int, height: int,
                taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> AnnotationSet:
    return parse_labels(Path(path).read_text(encoding="utf-8"),
                        width, height, taxonomy)


def save_labels(aset: AnnotationSet, path: str | Path) -> None:
    with atomic_write(path) as tmp:
        tmp.write_text(serialize_labels(aset), encoding="utf-8")


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 1:
        return labels == 1
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    return labels == sizes.argmax()


_RIGHT_OF = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1),
             (0, -1): (1, 0)}
_LEFT_OF = {d: (-r[0], -r[1]) for d, r in _RIGHT_OF.items()}


def _trace_boundary(component: np.ndarray) -> np.ndarray:
    """Walk the outer crack boundary of a component, clockwise on screen.

    Vertices are lattice corners (x, y); the edge being walked always has
    foreground on its right.  At corners where two foreground pixels touch
    diagonally both continuations are legal; turning left keeps the pair in
    a single loop, matching 8-connectivity.
    """
    rows, cols = np.nonzero(component)
    start_r = rows.min()
    start_c = cols[rows == start_r].min()
    padded = np.zeros((component.shape[0] + 2, component.shape[1] + 2),
                      dtype=bool)
    padded[1:-1, 1:-1] = component

    def fg(y: int, x: int) -> bool:
        return padded[y + 1, x + 1]

    def valid(x: int, y: int, d: tuple[int, int]) -> bool:
        if d == (1, 0):
            return fg(y, x) and not fg(y - 1, x)
        if d == (0, 1):
            return fg(y, x - 1) and not fg(y, x)
        if d == (-1, 0):
            return fg(y - 1, x - 1) and not fg(y, x - 1)
        return fg(y - 1, x) and not fg(y - 1, x - 1)

    start = (int(start_c), int(start_r))
    direction = (1, 0)
    assert valid(*start, direction)
    corners = [start]
    x, y = start
    limit = 4 * component.size + 8
    for _ in range(limit):
        x, y = x + direction[0], y + direction[1]
        if (x, y) == start:
            break
        for cand in (_LEFT_OF[direction], direction, _RIGHT_OF[direction]):
            if valid(x, y, cand):
                direction = cand
                break
        else:
            raise AssertionError("boundary walk lost the contour")
        corners.append((x, y))
    else:
        raise AssertionError("boundary walk did not close")
    return np.array(corners, dtype=np.float64)


def _collapse_collinear(corners: np.ndarray) -> np.ndarray:
    prev = np.roll(corners, 1, axis=0)
    nxt = np.roll(corners, -1, axis=0)
    a = corners - prev
    b = nxt - corners
    turn = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    keep = turn != 0
    return corners[keep]


def _douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Iterative polyline simplification on an open chain."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi <= lo + 1:
            continue
        seg = points[hi] - points[lo]
        length = np.hypot(*seg)
        mid = points[lo + 1:hi] - points[lo]
        if length == 0:
            dist = np.hypot(mid[:, 0], mid[:, 1])
        else:
            dist = np.abs(mid[:, 0] * seg[1] - mid[:, 1] * seg[0]) / length
        worst = int(dist.argmax())
        if dist[worst] > tolerance:
            split = lo + 1 + worst
            keep[split] = True
            stack.append((lo, split))
            stack.append((split, hi))
    return points[keep]


def _simplify_closed(corners: np.ndarray, tolerance: float) -> np.ndarray:
    corners = _collapse_collinear(corners)
    if len(corners) <= 4:
        return corners
    # Anchor the chain at the two mutually farthest of four extreme corners
    # so simplification of the closed loop cannot erase a whole side.
    anchor_a = int(np.lexsort((corners[:, 0], corners[:, 1]))[0])
    shifted = np.roll(corners, -anchor_a, axis=0)
    d = np.hypot(*(shifted - shifted[0]).T)
    anchor_b = int(d.argmax())
    first = _douglas_peucker(shifted[:anchor_b + 1], tolerance)
    second = _douglas_peucker(
        np.concatenate([shifted[anchor_b:], shifted[:1]]), tolerance)
    return np.concatenate([first[:-1], second[:-1]])


def mask_to_polygon(mask: np.ndarray,
                    tolerance_px: float = SIMPLIFY_TOLERANCE_PX) -> np.ndarray:
    """Trace the largest 8-connected component into a normalized polygon.

    Raises:
        EmptyMaskError: no foreground pixel.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMaskError("cannot trace an empty mask")
    component = _largest_component(mask)
    corners = _trace_boundary(component)
    corners = _simplify_closed(corners, tolerance_px)
    h, w = mask.shape
    return corners / np.array([w, h], dtype=np.float64)


def rasterize(instance: Instance, width: int, height: int) -> np.ndarray:
    """Fill the instance polygon with the even-odd rule at pixel centres."""
    poly = instance.polygon * np.array([width, height])
    xs, ys = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    yc = np.arange(height) + 0.5
    xc = np.arange(width) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in zip(xs, ys, xn, yn):
        if y0 == y1:
            continue
        ylo, yhi = (y0, y1) if y0 < y1 else (y1, y0)
        rows = np.nonzero((yc >= ylo) & (yc < yhi))[0]
        if rows.size == 0:
            continue
        x_int = x0 + (yc[rows] - y0) * (x1 - x0) / (y1 - y0)
        inside[rows] ^= xc[None, :] < x_int[:, None]
    return inside


def _plateau_markers(edt: np.ndarray, component: np.ndarray) -> np.ndarray:
    """Connected plateaus of local distance maxima, one marker label each."""
    local_max = (edt == ndimage.maximum_filter(edt, size=3)) & component
    markers, _ = ndimage.label(local_max, structure=_EIGHT_CONNECTED)
    return markers


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1),
               (0, 1), (1, -1), (1, 0), (1, 1)]


def _watershed(edt: np.ndarray, markers: np.ndarray,
               component: np.ndarray) -> np.ndarray:
    """Priority-flood watershed: grow markers downhill on the distance map.

    Deterministic: the heap breaks priority ties by insertion order, and
    seeds are pushed in raster order.
    """
    labels = markers.copy()
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for r, c in zip(*np.nonzero(markers)):
        heapq.heappush(heap, (-edt[r, c], counter, int(r), int(c)))
        counter += 1
    h, w = edt.shape
    while heap:
        _, _, r, c = heapq.heappop(heap)
        label = labels[r, c]
        for dr, dc in _NEIGHBOURS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            if component[nr, nc] and labels[nr, nc] == 0:
                labels[nr, nc] = label
                heapq.heappush(heap, (-edt[nr, nc], counter, nr, nc))
                counter += 1
    return labels


def separate_instances(merged: np.ndarray,
                       min_area: int = DEFAULT_MIN_AREA) -> list[np.ndarray]:
    """Split a combined binary mask into per-instance masks.

    Disjoint components separate trivially; blobs with several distance
    transform peaks are cut along the watershed ridge between the peaks.
    Pieces below min_area are discarded as specks.
    """
    merged = np.asarray(merged).astype(bool)
    if not merged.any():
        return []
    components, count = ndimage.label(merged, structure=_EIGHT_CONNECTED)
    out: list[np.ndarray] = []
    slices = ndimage.find_objects(components)
    for idx in range(1, count + 1):
        window = slices[idx - 1]
        local = components[window] == idx
        edt = ndimage.distance_transform_edt(local)
        markers = _plateau_markers(edt, local)
        n_markers = markers.max()
        if n_markers <= 1:
            pieces = [local]
        else:
            flooded = _watershed(edt, markers, local)
            pieces = [flooded == m for m in range(1, n_markers + 1)]
        for piece in pieces:
            if piece.sum() < min_area:
                continue
            full = np.zeros(merged.shape, dtype=bool)
            full[window] = piece
            out.append(full)
    return out


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        chain: list[np.ndarray] = []
        for p in seq:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _hull_area(hull: np.ndarray) -> float:
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _hull_contains(hull: np.ndarray, point: np.ndarray,
                   eps: float = 1e-12) -> bool:
    if len(hull) < 3:
        return False
    nxt = np.roll(hull, -1, axis=0)
    edge = nxt - hull
    rel = point - hull
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool((cross >= -eps).all() or (cross <= eps).all())


def associate_fasteners(
    aset: AnnotationSet,
    taxonomy: Taxonomy = DEFAULT_TAXONOMY,
) -> dict[int, int | None]:
    """Assign each fastener to the macro-component hull containing it.

    Keys and values index into aset.instances.  A fastener centroid inside
    several hulls goes to the smallest containing hull; inside none, the
    value is None.
    """
    fastener_classes = taxonomy.fastener_ids()
    hulls = []
    for idx, inst in enumerate(aset.instances):
        if inst.class_id in fastener_classes:
            continue
        hull = _convex_hull(inst.polygon)
        hulls.append((idx, hull, _hull_area(hull)))

    mapping: dict[int, int | None] = {}
    for idx, inst in enumerate(aset.instances):
        if inst.class_id not in fastener_classes:
            continue
        centroid = inst.centroid()
        containing = [(area, parent) for parent, hull, area in hulls
                      if _hull_contains(hull, centroid)]
        if containing:
            mapping[idx] = min(containing)[1]
        else:
            mapping[idx] = None
    return mapping


def from_index_maps(material_index: np.ndarray, instance_index: np.ndarray,
                    confidence: float = 1.0) -> AnnotationSet:
    """Derive ground-truth annotations from per-pixel index maps.

    Material slot k labels class id k - 1.  Instances are emitted in index
    order; an instance split across several components keeps only its
    largest part (the tracer's largest-component rule).
    """
    if material_index.shape != instance_index.shape:
        raise ParameterError("index maps must share dimensions")
    h, w = material_index.shape
    instances = []
    for idx in np.unique(instance_index):
        if idx == 0:
            continue
        sel = instance_index == idx
        materials = np.unique(material_index[sel])
        if len(materials) != 1 or materials[0] == 0:
            raise ParameterError(
                f"instance {idx} does not map to exactly one material")
        polygon = mask_to_polygon(sel)
        instances.append(Instance(class_id=int(materials[0]) - 1,
                                  polygon=polygon, confidence=confidence))
    return AnnotationSet(instances=instances, image_width=w, image_height=h)
