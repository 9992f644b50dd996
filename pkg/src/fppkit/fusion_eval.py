"""Label fusion onto reconstructed geometry, plus evaluation metrics.

Because the depth map and the annotations live on the same camera grid,
fusion is a per-pixel table lookup; there is no registration or
nearest-neighbour step anywhere in this module.  Metrics cover dense depth
error (RMSE/MAE in millimetres) and detection quality (box and mask AP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import DEFAULT_TAXONOMY, AnnotationSet, Taxonomy, rasterize
from .errors import EmptyRegionError, ParameterError
from .geometry import DepthFrame
from .ply import UNLABELED, write_ply

# IoU thresholds 0.50:0.05:0.95 inclusive, the usual 10-point range.
DEFAULT_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class LabeledCloud:
    """Point cloud with one taxonomy label per point.

    ``labels`` uses 255 for points no instance covers.  ``source_pixel``
    holds the (column, row) camera pixel each point came from, which is the
    full fusion provenance: label equals the annotation lookup at that pixel.
    """

    points: np.ndarray        # (M, 3) world mm
    labels: np.ndarray        # (M,) uint8
    source_pixel: np.ndarray  # (M, 2) int, (u, v)

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ParameterError(f"points must be (M, 3), got {self.points.shape}")
        m = self.points.shape[0]
        if self.labels.shape != (m,) or self.source_pixel.shape != (m, 2):
            raise ParameterError("points, labels and source_pixel lengths differ")

    def __len__(self) -> int:
        return self.points.shape[0]

    def save_ply(self, path) -> int:
        return write_ply(path, self.points, self.labels)


def paint_labels(annotations: AnnotationSet, width: int, height: int) -> np.ndarray:
    """Rasterize an annotation set into a (H, W) uint8 class image.

    Where instances overlap the highest-confidence one wins; among equal
    confidences the smallest mask wins, so fasteners survive sitting on top
    of the components they secure.  Uncovered pixels are 255.
    """
    label_img = np.full((height, width), UNLABELED, dtype=np.uint8)
    masks = [rasterize(inst, width, height) for inst in annotations.instances]
    # Paint losers first: ascending confidence, then descending area.
    order = sorted(range(len(masks)),
                   key=lambda i: (annotations.instances[i].confidence,
                                  -int(masks[i].sum())))
    for i in order:
        label_img[masks[i]] = annotations.instances[i].class_id
    return label_img


def fuse(frame: DepthFrame, annotations: AnnotationSet) -> LabeledCloud:
    """Attach instance labels to every valid reconstructed point.

    Raises:
        ParameterError: if the frame and annotation resolutions differ.
    """
    h, w = frame.z.shape
    if (annotations.image_width, annotations.image_height) != (w, h):
        raise ParameterError(
            f"annotation resolution {annotations.image_width}x"
            f"{annotations.image_height} does not match frame {w}x{h}")
    label_img = paint_labels(annotations, w, h)
    rows, cols = np.nonzero(frame.valid)
    return LabeledCloud(
        points=frame.world_xyz[rows, cols],
        labels=label_img[rows, cols],
        source_pixel=np.stack([cols, rows], axis=1),
    )


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    mae: float
    evaluated_pixels: int
    region: str

    def as_dict(self) -> dict:
        return {"rmse_mm": self.rmse, "mae_mm": self.mae,
                "evaluated_pixels": self.evaluated_pixels,
                "region": self.region}


def depth_metrics(predicted: DepthFrame, truth: np.ndarray,
                  region_mask: np.ndarray | None = None,
                  region: str = "all") -> DepthMetrics:
    """Depth error statistics over the jointly valid region.

    Args:
        predicted: reconstructed frame; only its valid pixels count.
        truth: (H, W) reference depth in mm; NaN marks no-reference pixels.
        region_mask: optional boolean restriction (e.g. unreliable pixels).
        region: tag stored in the result ("all" or "unreliable-only").

    Raises:
        EmptyRegionError: when no pixel is left to evaluate.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != predicted.z.shape:
        raise ParameterError(
            f"truth shape {truth.shape} does not match frame {predicted.z.shape}")
    domain = predicted.valid & np.isfinite(truth)
    if region_mask is not None:
        if region_mask.shape != truth.shape:
            raise ParameterError("region mask shape does not match frame")
        domain &= region_mask.astype(bool)
    count = int(domain.sum())
    if count == 0:
        raise EmptyRegionError("no jointly valid pixels to evaluate")
    delta = predicted.z[domain] - truth[domain]
    rmse = float(np.sqrt(np.mean(delta * delta)))
    mae = float(np.mean(np.abs(delta)))
    return DepthMetrics(rmse=rmse, mae=mae, evaluated_pixels=count,
                        region=region)


@dataclass(frozen=True)
class DetectionMetrics:
    per_class_ap50: dict[int, float]
    map50: float
    map50_95: float
    mode: str
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS

    def as_dict(self) -> dict:
        return {"mode": self.mode,
                "map50": self.map50,
                "map50_95": self.map50_95,
                "iou_thresholds": list(self.iou_thresholds),
                "per_class_ap50": {str(k): v
                                   for k, v in self.per_class_ap50.items()}}


def _bbox(polygon: np.ndarray) -> np.ndarray:
    return np.array([polygon[:, 0].min(), polygon[:, 1].min(),
                     polygon[:, 0].max(), polygon[:, 1].max()])


def _box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return float(inter / union) if union > 0 else 0.0


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union > 0 else 0.0


def _pair_ious(preds: list, gts: list, mode: str,
               size: tuple[int, int]) -> np.ndarray:
    """IoU matrix (num_pred, num_gt) for one image and one class."""
    out = np.zeros((len(preds), len(gts)))
    if mode == "box":
        pb = [_bbox(p.polygon) for p in preds]
        gb = [_bbox(g.polygon) for g in gts]
        for i, a in enumerate(pb):
            for j, b in enumerate(gb):
                out[i, j] = _box_iou(a, b)
    else:
        w, h = size
        pm = [rasterize(p, w, h) for p in preds]
        gm = [rasterize(g, w, h) for g in gts]
        for i, a in enumerate(pm):
            for j, b in enumerate(gm):
                out[i, j] = _mask_iou(a, b)
    return out


def _average_precision(confidences: np.ndarray, matches: np.ndarray,
                       num_gt: int) -> float:
    """All-points AP from per-prediction TP flags, already in rank order."""
    tp = np.cumsum(matches)
    fp = np.cumsum(~matches)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    # Monotone envelope from the right, then area under the curve.
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detection_metrics(predictions: list[AnnotationSet],
                      ground_truth: list[AnnotationSet],
                      mode: str = "box",
                      iou_thresholds: tuple[float, ...] | None = None,
                      ) -> DetectionMetrics:
    """Greedy-matched average precision over a list of image pairs.

    Per class and IoU threshold, predictions are ranked by confidence and
    matched to the highest-IoU still-unmatched ground truth of the same
    image; the precision-recall curve is integrated with all-points
    interpolation.  Classes with no ground truth anywhere are excluded from
    the means.  ``mode`` selects axis-aligned bounding-box IoU or rasterized
    mask IoU.
    """
    if mode not in ("box", "mask"):
        raise ParameterError(f"mode must be 'box' or 'mask', got {mode!r}")
    if len(predictions) != len(ground_truth):
        raise ParameterError("prediction and ground-truth list lengths differ")
    thresholds = (DEFAULT_IOU_THRESHOLDS if iou_thresholds is None
                  else tuple(float(t) for t in iou_thresholds))
    if not thresholds:
        raise ParameterError("need at least one IoU threshold")

    gt_classes = sorted({inst.class_id
                         for aset in ground_truth for inst in aset.instances})
    eval_thresholds = sorted(set(thresholds) | {0.5})

    ap = {c: {} for c in gt_classes}
    for cls in gt_classes:
        # (confidence, image index, IoU row vs that image's GT of this class)
        scored: list[tuple[float, int, np.ndarray]] = []
        gt_counts = []
        for img, (pred_set, gt_set) in enumerate(zip(predictions,
                                                     ground_truth)):
            if mode == "mask" and (pred_set.image_width,
                                   pred_set.image_height) != (
                    gt_set.image_width, gt_set.image_height):
                raise ParameterError(
                    f"image {img}: prediction and ground-truth resolutions differ")
            preds = [i for i in pred_set.instances if i.class_id == cls]
            gts = [i for i in gt_set.instances if i.class_id == cls]
            gt_counts.append(len(gts))
            ious = _pair_ious(preds, gts, mode,
                              (gt_set.image_width, gt_set.image_height))
            for row, inst in enumerate(preds):
                scored.append((inst.confidence, img, ious[row]))
        num_gt = sum(gt_counts)

        conf = np.array([s[0] for s in scored])
        order = np.argsort(-conf, kind="stable")
        for thr in eval_thresholds:
            taken = [np.zeros(n, dtype=bool) for n in gt_counts]
            matches = np.zeros(len(scored), dtype=bool)
            for rank, idx in enumerate(order):
                _, img, ious = scored[idx]
                free = ~taken[img]
                if not free.any():
                    continue
                cand = np.where(free, ious, -1.0)
                j = int(np.argmax(cand))
                if cand[j] >= thr:
                    taken[img][j] = True
                    matches[rank] = True
            if len(scored) == 0:
                ap[cls][thr] = 0.0
            else:
                ap[cls][thr] = _average_precision(conf[order], matches,
                                                  num_gt)

    per_class_ap50 = {c: ap[c][0.5] for c in gt_classes}
    if gt_classes:
        map50 = float(np.mean([per_class_ap50[c] for c in gt_classes]))
        map50_95 = float(np.mean([[ap[c][t] for t in thresholds]
                                  for c in gt_classes]))
    else:
        map50 = map50_95 = 0.0
    return DetectionMetrics(per_class_ap50=per_class_ap50, map50=map50,
                            map50_95=map50_95, mode=mode,
                            iou_thresholds=thresholds)


def render_depth_table(metrics: DepthMetrics) -> str:
    lines = [
        f"{'region':<18}{'RMSE (mm)':>12}{'MAE (mm)':>12}{'pixels':>10}",
        f"{metrics.region:<18}{metrics.rmse:>12.4f}{metrics.mae:>12.4f}"
        f"{metrics.evaluated_pixels:>10d}",
    ]
    return "\n".join(lines)


def render_detection_table(metrics: DetectionMetrics,
                           taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> str:
    lines = [f"{'class':<24}{'AP@50':>8}"]
    for cls in sorted(metrics.per_class_ap50):
        try:
            name = taxonomy.name_of(cls)
        except IndexError:
            name = f"class {cls}"
        lines.append(f"{name:<24}{metrics.per_class_ap50[cls]:>8.4f}")
    lines.append(f"{'mAP@50':<24}{metrics.map50:>8.4f}")
    lines.append(f"{'mAP@50:95':<24}{metrics.map50_95:>8.4f}")
    lines.append(f"mode: {metrics.mode}")
    return "\n".join(lines)
