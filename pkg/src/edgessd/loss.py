"""Detection objective: SmoothL1 localization, focal or hard-negative-mined
classification, and the 1/N-normalized total, each with exact gradients.

Class index 0 is background.
"""

import math
from dataclasses import dataclass

import numpy as np

from edgessd.anchors import MatchResult, encode_boxes, match_anchors

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossReport:
    l_conf: float
    l_loc: float
    total: float
    n_matched: int


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def localization_loss(offsets, match: MatchResult, targets):
    """Sum of SmoothL1 over the four offsets of every positive anchor.

    ``targets`` is ``(A, 4)``; rows of negative anchors are ignored.
    Returns ``(loss, grad_offsets)``.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    pos = match.positive
    grad = np.zeros_like(offsets)
    if not pos.any():
        return 0.0, grad
    diff = offsets[pos] - np.asarray(targets, dtype=np.float64)[pos]
    grad[pos] = smooth_l1_grad(diff)
    return float(np.sum(smooth_l1(diff))), grad


def focal_conf_loss(logits, match: MatchResult, fp: FocalParams = FocalParams()):
    """Focal classification loss over every anchor.

    Positives are scored on their matched class, all negatives on background;
    each term is ``-alpha (1 - p)^gamma log p``. Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    prob = softmax(logits)
    rows = np.arange(n)
    target = match.labels
    p = prob[rows, target]
    p_safe = np.maximum(p, PROB_FLOOR)
    log_p = np.log(p_safe)
    one_minus = 1.0 - p
    mod = one_minus**fp.gamma
    loss = -fp.alpha * np.sum(mod * log_p)

    # dL/dp, then chain through the softmax: dp/dz = p (onehot - prob)
    if fp.gamma == 0:
        dmod_term = np.zeros(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod_term = np.where(one_minus > 0, fp.gamma * one_minus ** (fp.gamma - 1) * p * log_p, 0.0)
    dlog_term = np.where(p > PROB_FLOOR, mod * p / p_safe, 0.0)
    coef = fp.alpha * (dmod_term - dlog_term)  # = dL/dp * p
    onehot = np.zeros_like(prob)
    onehot[rows, target] = 1.0
    grad = coef[:, None] * (onehot - prob)
    return float(loss), grad


def cross_entropy_terms(logits, labels):
    prob = softmax(logits)
    p = prob[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR)), prob


def select_hard_negatives(bg_loss, negative_mask, num_positive: int, ratio: float = 3.0) -> np.ndarray:
    """Boolean mask of the ``ceil(ratio * N)`` highest-loss negatives (one when N = 0)."""
    neg_idx = np.flatnonzero(negative_mask)
    want = math.ceil(ratio * num_positive) if num_positive > 0 else 1
    want = min(want, len(neg_idx))
    order = neg_idx[np.argsort(-bg_loss[neg_idx], kind="stable")]
    keep = np.zeros(len(bg_loss), dtype=bool)
    keep[order[:want]] = True
    return keep


def hnm_conf_loss(logits, match: MatchResult, ratio: float = 3.0):
    """Cross-entropy over positives plus the hardest negatives at ``ratio``:1.

    Returns ``(loss, grad_logits, kept_negatives_mask)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    ce, prob = cross_entropy_terms(logits, match.labels)
    pos = match.positive
    kept_neg = select_hard_negatives(ce, ~pos, match.num_positive, ratio)
    use = pos | kept_neg
    loss = float(np.sum(ce[use]))

    rows = np.arange(len(logits))
    p = prob[rows, match.labels]
    onehot = np.zeros_like(prob)
    onehot[rows, match.labels] = 1.0
    # clamped probabilities have zero derivative
    live = use & (p > PROB_FLOOR)
    grad = np.where(live[:, None], prob - onehot, 0.0)
    return loss, grad, kept_neg


def total_loss(l_conf: float, l_loc: float, n: int) -> LossReport:
    if n < 0:
        raise ValueError(f"matched count must be >= 0, got {n}")
    return LossReport(float(l_conf), float(l_loc), (l_conf + l_loc) / max(n, 1), int(n))


def image_loss(logits, offsets, anchors, gt_boxes, gt_labels, *, focal: FocalParams | None = FocalParams(),
               hnm_ratio: float = 3.0, threshold: float = 0.5):
    """Full per-image objective.

    Matches anchors, encodes targets and evaluates the normalized total.
    ``focal=None`` selects hard negative mining at ``hnm_ratio``.

    Returns:
        ``(LossReport, grad_logits, grad_offsets)``; gradients are of ``total``.
    """
    match = match_anchors(anchors, gt_boxes, gt_labels, threshold)
    a_boxes = anchors.boxes if hasattr(anchors, "boxes") else np.asarray(anchors)
    targets = np.zeros((len(a_boxes), 4))
    pos = match.positive
    if pos.any():
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        targets[pos] = encode_boxes(gt[match.gt_index[pos]], a_boxes[pos])
    l_loc, g_off = localization_loss(offsets, match, targets)
    if focal is not None:
        l_conf, g_log = focal_conf_loss(logits, match, focal)
    else:
        l_conf, g_log, _ = hnm_conf_loss(logits, match, hnm_ratio)
    report = total_loss(l_conf, l_loc, match.num_positive)
    scale = 1.0 / max(match.num_positive, 1)
    return report, g_log * scale, g_off * scale
