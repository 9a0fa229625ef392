"""PASCAL-VOC style evaluation: TP/FP assignment, precision/recall sweeps,
11-point interpolated AP and mAP."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from edgessd.anchors import Box, jaccard_matrix

RECALL_LEVELS = tuple(k / 10 for k in range(11))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    tp: int
    fp: int
    fn: int

    @property
    def points(self) -> list:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


@dataclass
class EvalReport:
    ap: dict  # class id -> AP in [0, 1]
    curves: dict  # class id -> PRCurve
    class_names: dict = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        return mean_ap(list(self.ap.values()))

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "classes": [
                {
                    "class_id": c,
                    "name": self.class_names.get(c, str(c)),
                    "ap": self.ap[c],
                    "tp": self.curves[c].tp,
                    "fp": self.curves[c].fp,
                    "fn": self.curves[c].fn,
                }
                for c in sorted(self.ap)
            ],
        }

    def write(self, out_dir) -> Path:
        """Write ``report.json`` plus one ``pr_class<id>.csv`` per class."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        for c, curve in sorted(self.curves.items()):
            with open(out / f"pr_class{c}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["recall", "precision"])
                for r, p in curve.points:
                    w.writerow([repr(r), repr(p)])
        return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def read_pr_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["recall"]), float(r["precision"])) for r in rows]


def precision_recall(tp: int, fp: int, fn: int) -> tuple:
    """Precision and recall, with 0/0 read as precision 1 and recall 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def assign_tp_fp(image_ids, corners, scores, gts: dict, iou_threshold: float = 0.5):
    """Flag one class's detections as true or false positives.

    Detections are visited by descending score (ties keep input order). Each
    claims the highest-overlap ground truth of its image that is still
    unclaimed and overlaps by at least ``iou_threshold``; if none, it is a
    false positive.

    Args:
        image_ids: per-detection image key.
        corners: ``(D, 4)`` detection corners.
        scores: ``(D,)`` confidences.
        gts: image key -> ``(G, 4)`` ground-truth corners of this class.

    Returns:
        ``(order, is_tp, n_gt)``: visit order, TP flag per visited detection,
        and the total ground-truth count.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-scores, kind="stable")
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts.values())
    claimed = {k: np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for k, g in gts.items()}
    is_tp = np.zeros(len(order), dtype=bool)
    for pos, d in enumerate(order):
        img = image_ids[d]
        g = gts.get(img)
        if g is None or len(claimed[img]) == 0:
            continue
        iou = jaccard_matrix(corners[d : d + 1], np.asarray(g).reshape(-1, 4))[0]
        iou = np.where(claimed[img] | (iou < iou_threshold), -1.0, iou)
        best = int(np.argmax(iou))
        if iou[best] >= 0:
            claimed[img][best] = True
            is_tp[pos] = True
    return order, is_tp, n_gt


def pr_curve(sorted_scores, is_tp, n_gt: int) -> PRCurve:
    """Sweep the score-sorted flags, emitting one point per distinct score."""
    sorted_scores = np.asarray(sorted_scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    tp_cum = np.cumsum(is_tp)
    fp_cum = np.cumsum(~is_tp)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True)) if len(is_tp) else []
    rec, prec = [], []
    for e in ends:
        p, r = precision_recall(int(tp_cum[e]), int(fp_cum[e]), n_gt - int(tp_cum[e]))
        rec.append(r)
        prec.append(p)
    tp = int(tp_cum[-1]) if len(is_tp) else 0
    fp = int(fp_cum[-1]) if len(is_tp) else 0
    return PRCurve(np.array(rec), np.array(prec), tp, fp, n_gt - tp)


def interpolated_ap(curve: PRCurve) -> float:
    """Mean over recall levels 0, 0.1, ..., 1 of the best precision at or beyond that recall."""
    total = 0.0
    for r in RECALL_LEVELS:
        mask = curve.recall >= r
        total += float(curve.precision[mask].max()) if mask.any() else 0.0
    return total / len(RECALL_LEVELS)


def mean_ap(per_class_aps) -> float:
    aps = list(per_class_aps)
    if not aps:
        raise ValueError("mAP over zero classes is undefined")
    return float(sum(aps) / len(aps))


def evaluate_class(detections, gts: dict, iou_threshold: float = 0.5) -> tuple:
    """AP and PR curve of one class; ``detections`` are :class:`Detection` s."""
    ids = [d.image_id for d in detections]
    corners = np.array([d.box.corners for d in detections], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order, is_tp, n_gt = assign_tp_fp(ids, corners, scores, gts, iou_threshold)
    curve = pr_curve(scores[order], is_tp, n_gt)
    return interpolated_ap(curve), curve


def evaluate_detections(detections, ground_truth, class_ids=None, iou_threshold: float = 0.5,
                        class_names=None) -> EvalReport:
    """Evaluate detections against ground truth.

    Args:
        detections: iterable of :class:`Detection`.
        ground_truth: iterable of ``(image_id, class_id, Box)``.
        class_ids: classes to score; default every class with ground truth.
            Classes with no ground truth are skipped.
    """
    by_class_gt: dict = {}
    for image_id, class_id, box in ground_truth:
        by_class_gt.setdefault(int(class_id), {}).setdefault(image_id, []).append(box.corners)
    if class_ids is None:
        class_ids = sorted(by_class_gt)
    dets_by_class: dict = {}
    for d in detections:
        dets_by_class.setdefault(int(d.class_id), []).append(d)
    aps, curves = {}, {}
    for c in class_ids:
        if c not in by_class_gt:
            continue
        gts = {k: np.array(v) for k, v in by_class_gt[c].items()}
        aps[c], curves[c] = evaluate_class(dets_by_class.get(c, []), gts, iou_threshold)
    if not aps:
        raise ValueError("no ground truth to evaluate against")
    return EvalReport(aps, curves, dict(class_names or {}))
