"""Default boxes, jaccard overlap, anchor matching, offset coding and NMS.

Boxes travel as ``(n, 4)`` float arrays in center form ``(cx, cy, w, h)``
unless a function says ``corners`` (``xmin, ymin, xmax, ymax``). :class:`Box`
is the scalar form used at API edges.
"""

import math
from dataclasses import dataclass

import numpy as np

BOXES_PER_CELL = 6
# per cell: a_r = 1, the extra a_r = 1 box at the geometric-mean scale, then 2, 1/2, 3, 1/3
ASPECT_RATIOS = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)
LAST_NEXT_SCALE = 1.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive width and height, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, xmin, ymin, xmax, ymax) -> "Box":
        if xmax <= xmin or ymax <= ymin:
            raise ValueError(f"degenerate corners ({xmin}, {ymin}, {xmax}, {ymax})")
        return cls((xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin)

    @property
    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def to_corners(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def to_center(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(c[:, :2] + c[:, 2:]) / 2, c[:, 2:] - c[:, :2]], axis=1)


def jaccard_matrix(corners_a, corners_b) -> np.ndarray:
    """Pairwise intersection-over-union, ``(len(a), len(b))``."""
    a = np.asarray(corners_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(corners_b, dtype=np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def jaccard(a: Box, b: Box) -> float:
    return float(jaccard_matrix([a.corners], [b.corners])[0, 0])


# ------------------------------------------------------------ default boxes


def scales(num_maps: int, s_min: float, s_max: float) -> list:
    if num_maps < 2:
        raise ValueError(f"need at least 2 feature maps for the linear scale rule, got {num_maps}")
    if not 0 < s_min < s_max <= 1:
        raise ValueError(f"need 0 < s_min < s_max <= 1, got s_min={s_min}, s_max={s_max}")
    step = (s_max - s_min) / (num_maps - 1)
    return [s_min + step * k for k in range(num_maps)]


@dataclass
class AnchorSet:
    """All default boxes of a model in the flat order used by the heads:
    feature map, row, column, box-within-cell."""

    feature_maps: list  # [(grid size, scale)]
    boxes: np.ndarray  # (A, 4) center form
    map_index: np.ndarray  # (A,)
    cells: np.ndarray  # (A, 2) as (i, j) = (column, row)
    aspect: np.ndarray  # (A,)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def corners(self) -> np.ndarray:
        return to_corners(self.boxes)

    def box(self, idx: int) -> Box:
        return Box(*self.boxes[idx])


def gen_default_boxes(feature_map_sizes, s_min: float = 0.2, s_max: float = 0.9) -> AnchorSet:
    sizes = [int(f) for f in feature_map_sizes]
    if any(f < 1 for f in sizes):
        raise ValueError(f"feature map sizes must be positive: {sizes}")
    sk = scales(len(sizes), s_min, s_max)
    boxes, maps, cells, aspects = [], [], [], []
    for k, f in enumerate(sizes):
        s = sk[k]
        s_next = sk[k + 1] if k + 1 < len(sk) else LAST_NEXT_SCALE
        shapes = [(s, s, 1.0), (math.sqrt(s * s_next),) * 2 + (1.0,)]
        for ar in ASPECT_RATIOS[1:]:
            r = math.sqrt(ar)
            shapes.append((s * r, s / r, ar))
        for j in range(f):
            cy = (j + 0.5) / f
            for i in range(f):
                cx = (i + 0.5) / f
                for w, h, ar in shapes:
                    boxes.append((cx, cy, w, h))
                    maps.append(k)
                    cells.append((i, j))
                    aspects.append(ar)
    return AnchorSet(
        feature_maps=list(zip(sizes, sk)),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        map_index=np.array(maps, dtype=np.int64),
        cells=np.array(cells, dtype=np.int64).reshape(-1, 2),
        aspect=np.array(aspects, dtype=np.float64),
    )


# ----------------------------------------------------------------- matching


@dataclass
class MatchResult:
    gt_index: np.ndarray  # (A,) matched ground truth, -1 for negatives
    labels: np.ndarray  # (A,) class id, 0 for negatives
    overlaps: np.ndarray  # (A,) overlap with the assigned (or best) ground truth

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))


def match_anchors(anchors, gt_boxes, gt_labels, threshold: float = 0.5) -> MatchResult:
    """Assign anchors to ground truths.

    An anchor is positive when its best overlap reaches ``threshold``; ties go
    to the lower ground-truth index. Each ground truth additionally claims its
    best-overlapping anchor (the next best if that one was already claimed),
    so no ground truth is left without a positive.

    Args:
        anchors: :class:`AnchorSet` or ``(A, 4)`` center-form array.
        gt_boxes: ``(G, 4)`` center-form ground truths.
        gt_labels: ``(G,)`` class ids, all >= 1.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    a_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    n_anchors = len(a_boxes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return MatchResult(np.full(n_anchors, -1), np.zeros(n_anchors, dtype=np.int64), np.zeros(n_anchors))

    iou = jaccard_matrix(to_corners(a_boxes), to_corners(gt_boxes))  # (A, G)
    best_gt = iou.argmax(axis=1)
    best_ov = iou[np.arange(n_anchors), best_gt]
    gt_index = np.where(best_ov >= threshold, best_gt, -1)
    overlaps = best_ov.copy()

    forced = np.zeros(n_anchors, dtype=bool)
    for g in range(len(gt_boxes)):
        # stable descending order: ties resolve to the lower anchor index
        for a in np.argsort(-iou[:, g], kind="stable"):
            if not forced[a]:
                forced[a] = True
                gt_index[a] = g
                overlaps[a] = iou[a, g]
                break
    labels = np.where(gt_index >= 0, gt_labels[np.maximum(gt_index, 0)], 0)
    return MatchResult(gt_index, labels, overlaps)


# ----------------------------------------------------------- offset coding


def encode_boxes(gt, defaults) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    if np.any(gt[:, 2:] <= 0) or np.any(d[:, 2:] <= 0):
        raise ValueError("offset encoding needs positive widths and heights")
    return np.concatenate(
        [(gt[:, :2] - d[:, :2]) / d[:, 2:], np.log(gt[:, 2:] / d[:, 2:])],
        axis=1,
    )


def decode_boxes(offsets, defaults) -> np.ndarray:
    o = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    if np.any(d[:, 2:] <= 0):
        raise ValueError("offset decoding needs positive default-box sizes")
    return np.concatenate([d[:, :2] + o[:, :2] * d[:, 2:], d[:, 2:] * np.exp(o[:, 2:])], axis=1)


def encode(gt: Box, d: Box) -> tuple:
    return tuple(float(v) for v in encode_boxes(gt.as_array(), d.as_array())[0])


def decode(offsets, d: Box) -> Box:
    return Box(*(float(v) for v in decode_boxes(offsets, d.as_array())[0]))


# ---------------------------------------------------------------------- NMS


def nms(corners, scores, classes, iou_threshold: float = 0.45, top_k: int = 200) -> np.ndarray:
    """Greedy per-class suppression.

    Returns indices of survivors ordered by class, then descending score.
    A box is dropped when its overlap with an already kept same-class box
    exceeds ``iou_threshold``. Equal scores keep input order.
    """
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes).reshape(-1)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    keep_all = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        idx = idx[np.argsort(-scores[idx], kind="stable")]
        iou = jaccard_matrix(corners[idx], corners[idx])
        suppressed = np.zeros(len(idx), dtype=bool)
        kept = []
        for pos in range(len(idx)):
            if suppressed[pos]:
                continue
            kept.append(idx[pos])
            if len(kept) >= top_k:
                break
            suppressed |= iou[pos] > iou_threshold
        keep_all.extend(kept)
    return np.asarray(keep_all, dtype=np.int64)
