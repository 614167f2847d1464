"""Detection and segmentation metrics.

AP protocol: per class, predictions are visited in descending score (ties in
input order) and greedily matched to the unmatched ground truth of the same
image with the highest IoU at or above the threshold.  Precision is made
monotone from the right and read at the 101 recall levels 0, 0.01, ..., 1;
the class AP is the mean of those reads and the reported AP is the mean over
classes that have ground truth.

Size-restricted AP follows the usual area-range convention: ground truth
outside the bucket is ignored (a prediction matched to it is neither a true
nor a false positive) and unmatched predictions whose own area lies outside
the bucket are dropped.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..data import MEDIUM_AREA, SIZE_BUCKETS, SMALL_AREA

RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
PQ_IOU = 0.5


@dataclass
class Detection:
    image: int
    class_id: int
    score: float
    box: np.ndarray  # normalized cx, cy, w, h
    mask: np.ndarray | None = None  # bool [H, W]


@dataclass
class GroundTruth:
    image: int
    class_id: int
    box: np.ndarray
    mask: np.ndarray | None = None
    area: float | None = None  # texels; defaults to the mask area


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of cx,cy,w,h boxes [n,4] x [m,4]."""
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, bool).reshape(len(a), -1).astype(float)
    b = np.asarray(b, bool).reshape(len(b), -1).astype(float)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def interpolated_ap(hits: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-ordered hit flags."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # first index whose recall reaches each level (recall is non-decreasing)
    idx = np.searchsorted(recall, RECALL_LEVELS - 1e-12, side="left")
    reads = np.where(idx < hits.size, envelope[np.minimum(idx, hits.size - 1)], 0.0)
    return float(reads.mean())


def _size_ok(area: float, bucket: str | None) -> bool:
    if bucket is None:
        return True
    if bucket == "small":
        return area < SMALL_AREA
    if bucket == "medium":
        return SMALL_AREA <= area < MEDIUM_AREA
    if bucket == "large":
        return area >= MEDIUM_AREA
    raise ValueError(f"unknown size bucket {bucket!r}")


def average_precision(detections: list[Detection], truths: list[GroundTruth], iou_threshold: float = 0.5,
                      use_masks: bool = False, bucket: str | None = None, image_size: tuple[int, int] = (64, 64)
                      ) -> float:
    """Mean over classes with (in-bucket) ground truth of the 101-point AP."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    h, w = image_size

    def gt_area(g: GroundTruth) -> float:
        if g.area is not None:
            return g.area
        if g.mask is not None:
            return float(g.mask.sum())
        return float(g.box[2] * g.box[3] * h * w)

    def det_area(d: Detection) -> float:
        if use_masks and d.mask is not None:
            return float(d.mask.sum())
        return float(d.box[2] * d.box[3] * h * w)

    classes = sorted({g.class_id for g in truths if _size_ok(gt_area(g), bucket)})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        gts = [g for g in truths if g.class_id == cls]
        ignore = np.array([not _size_ok(gt_area(g), bucket) for g in gts], dtype=bool)
        dets = [d for d in detections if d.class_id == cls]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable: ties keep input order
        by_image: dict[int, list[int]] = {}
        for gi, g in enumerate(gts):
            by_image.setdefault(g.image, []).append(gi)
        used = np.zeros(len(gts), dtype=bool)
        hits = []
        for di in order:
            d = dets[di]
            cand = [gi for gi in by_image.get(d.image, []) if not used[gi]]
            best, best_iou, best_ign = None, -1.0, True
            if cand:
                if use_masks:
                    ious = mask_iou_matrix(d.mask[None], np.array([gts[gi].mask for gi in cand]))[0]
                else:
                    ious = box_iou_matrix(d.box[None], np.array([gts[gi].box for gi in cand]))[0]
                # prefer in-bucket truths, then the highest IoU, then the earliest
                for gi, iou in zip(cand, ious):
                    if iou < iou_threshold:
                        continue
                    key_better = (best is None or (best_ign and not ignore[gi])
                                  or (best_ign == ignore[gi] and iou > best_iou))
                    if key_better:
                        best, best_iou, best_ign = gi, iou, bool(ignore[gi])
            if best is not None:
                used[best] = True
                if best_ign:
                    continue
                hits.append(True)
            else:
                if not _size_ok(det_area(d), bucket):
                    continue
                hits.append(False)
        aps.append(interpolated_ap(np.array(hits, dtype=float), int((~ignore).sum())))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# panoptic quality
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    class_id: int
    mask: np.ndarray  # bool [H, W]


def panoptic_quality(pred_images: list[list[Segment]], gt_images: list[list[Segment]], thing_classes: set[int],
                     void_masks: list[np.ndarray] | None = None) -> tuple[float, float, float]:
    """(PQ, PQ_things, PQ_stuff) with unique matching at IoU > 0.5.

    Void texels are removed from IoU unions; predicted segments lying more
    than half in void are not counted as false positives.
    """
    stats: dict[int, list[float]] = {}  # class -> [iou_sum, tp, fp, fn]
    for idx, (preds, gts) in enumerate(zip(pred_images, gt_images)):
        void = None if void_masks is None else void_masks[idx]
        matched_pred: set[int] = set()
        matched_gt: set[int] = set()
        for gi, g in enumerate(gts):
            for pi, p in enumerate(preds):
                if p.class_id != g.class_id or pi in matched_pred:
                    continue
                inter = np.logical_and(p.mask, g.mask).sum()
                union = np.logical_or(p.mask, g.mask)
                if void is not None:
                    union = union & ~void
                iou = inter / max(union.sum(), 1)
                if iou > PQ_IOU:
                    s = stats.setdefault(g.class_id, [0.0, 0, 0, 0])
                    s[0] += iou
                    s[1] += 1
                    matched_pred.add(pi)
                    matched_gt.add(gi)
                    break
        for gi, g in enumerate(gts):
            if gi not in matched_gt:
                stats.setdefault(g.class_id, [0.0, 0, 0, 0])[3] += 1
        for pi, p in enumerate(preds):
            if pi in matched_pred:
                continue
            if void is not None and p.mask.sum() and (p.mask & void).sum() > 0.5 * p.mask.sum():
                continue
            stats.setdefault(p.class_id, [0.0, 0, 0, 0])[2] += 1

    def pq(classes) -> float:
        vals = []
        for c in classes:
            iou_sum, tp, fp, fn = stats[c]
            denom = tp + 0.5 * fp + 0.5 * fn
            if denom > 0:
                vals.append(iou_sum / denom)
        return float(np.mean(vals)) if vals else 0.0

    all_classes = sorted(stats)
    return (pq(all_classes), pq([c for c in all_classes if c in thing_classes]),
            pq([c for c in all_classes if c not in thing_classes]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    ap50: float = 0.0
    ap75: float = 0.0
    mask_ap50: float = 0.0
    pq: float = 0.0
    pq_th: float = 0.0
    pq_st: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {f.name}={v} outside [0, 1]")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in asdict(self).items():
                writer.writerow([key, f"{value:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["metric", "value"]:
            raise ValueError(f"{path} is not a metric report")
        return cls(**{k: float(v) for k, v in rows[1:]})

    def rounded(self) -> "MetricReport":
        return MetricReport(**{k: round(v, 6) for k, v in asdict(self).items()})


__all__ = [
    "Detection", "GroundTruth", "MetricReport", "SIZE_BUCKETS", "Segment", "average_precision",
    "box_iou_matrix", "interpolated_ap", "mask_iou_matrix", "panoptic_quality",
]
