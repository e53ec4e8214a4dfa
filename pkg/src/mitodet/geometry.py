"""Box geometry kernel: anchors, IoU, label assignment, delta coding, NMS.

Everything here is pure numpy on (N, 4) float arrays in (x1, y1, x2, y2)
pixel coordinates with x1 <= x2, y1 <= y2. These functions are the
reference geometry for both the region-proposal stage and evaluation, so
they stay free of any framework state and are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Anchor / proposal label values.
FOREGROUND = 1
BACKGROUND = 0
IGNORE = -1

# Log-size deltas are clamped here before exponentiation so a wild
# prediction cannot overflow into an astronomically large box.
MAX_LOG_SIZE_DELTA = 4.0


def as_boxes(boxes) -> np.ndarray:
    """Coerce input to a float64 (N, 4) box array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (N, 4), got {arr.shape}")
    return arr


def box_area(boxes) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0.0 when the union is empty."""
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b))."""
    a = as_boxes(boxes_a)
    b = as_boxes(boxes_b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class AnchorGrid:
    """All anchors for one feature map, flattened cell-major.

    For each cell (row-major), for each scale, for each ratio, one box of
    area scale**2 and aspect ratio h/w = ratio centered on the cell center
    ((col + 0.5) * stride, (row + 0.5) * stride). Anchors are unclipped.
    """

    stride: float
    scales: tuple
    ratios: tuple
    cells: tuple  # (cells_y, cells_x)
    anchors: np.ndarray  # (N, 4)
    cell_index: np.ndarray  # (N, 2) (row, col) provenance
    scale_of: np.ndarray  # (N,)
    ratio_of: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def generate_anchors(feature_h: int, feature_w: int, stride: float,
                     scales, ratios) -> AnchorGrid:
    """Lay anchors of every (scale, ratio) on the stride lattice.

    Args:
        feature_h, feature_w: feature map cell counts.
        stride: image pixels per feature cell.
        scales: anchor sizes in pixels; each anchor has area scale**2.
        ratios: aspect ratios h/w.

    Returns:
        AnchorGrid with feature_h * feature_w * len(scales) * len(ratios)
        anchors in cell-major order.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    scales = tuple(float(s) for s in scales)
    ratios = tuple(float(r) for r in ratios)
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")

    # One (w, h) template per (scale, ratio), ratio-major within a scale.
    ws, hs, template_s, template_r = [], [], [], []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            ws.append(w)
            hs.append(h)
            template_s.append(s)
            template_r.append(r)
    ws = np.asarray(ws)
    hs = np.asarray(hs)

    rows, cols = np.mgrid[0:feature_h, 0:feature_w]
    cx = (cols.ravel() + 0.5) * stride
    cy = (rows.ravel() + 0.5) * stride

    # (cells, A, 4) -> (cells * A, 4)
    x1 = cx[:, None] - ws[None, :] / 2
    y1 = cy[:, None] - hs[None, :] / 2
    x2 = cx[:, None] + ws[None, :] / 2
    y2 = cy[:, None] + hs[None, :] / 2
    anchors = np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4)

    n_cells = feature_h * feature_w
    a = len(ws)
    cell_index = np.stack([np.repeat(rows.ravel(), a),
                           np.repeat(cols.ravel(), a)], axis=1)
    return AnchorGrid(
        stride=float(stride),
        scales=scales,
        ratios=ratios,
        cells=(feature_h, feature_w),
        anchors=anchors,
        cell_index=cell_index,
        scale_of=np.tile(np.asarray(template_s), n_cells),
        ratio_of=np.tile(np.asarray(template_r), n_cells),
    )


@dataclass
class AnchorLabels:
    """Per-anchor training labels and regression targets.

    labels[i] is FOREGROUND, BACKGROUND, or IGNORE. matched_gt[i] is the
    ground-truth index a foreground anchor regresses to (-1 otherwise),
    and targets[i] holds its encode_box deltas (zeros otherwise).
    """

    labels: np.ndarray  # (N,) int8
    matched_gt: np.ndarray  # (N,) int64
    targets: np.ndarray  # (N, 4) float64

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FOREGROUND)

    @property
    def background(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BACKGROUND)


def assign_anchor_labels(anchors, gt_boxes, fg_thresh: float = 0.5,
                         bg_thresh: float = 0.1) -> AnchorLabels:
    """Label anchors against ground truth by max IoU.

    An anchor is foreground when its best IoU exceeds fg_thresh, background
    at bg_thresh or below, and ignored in between. On top of the threshold
    rule, each ground truth's single best anchor (first index on ties) is
    forced foreground and re-matched to that ground truth, provided the
    overlap is positive; otherwise a small object could end up with no
    positive anchor at all. With no ground truth every anchor is background.
    """
    if not 0 <= bg_thresh < fg_thresh <= 1:
        raise ValueError("thresholds must satisfy 0 <= bg < fg <= 1")
    anchors = as_boxes(anchors)
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("anchor list is empty")

    labels = np.full(n, IGNORE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)

    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        labels[:] = BACKGROUND
        return AnchorLabels(labels, matched, targets)

    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]

    labels[best_iou <= bg_thresh] = BACKGROUND
    fg = best_iou > fg_thresh
    labels[fg] = FOREGROUND
    matched[fg] = best_gt[fg]

    # Forced match: gt index order, first argmax anchor on ties.
    for g in range(gt.shape[0]):
        best_anchor = int(ious[:, g].argmax())
        if ious[best_anchor, g] > 0:
            labels[best_anchor] = FOREGROUND
            matched[best_anchor] = g

    fg_idx = np.flatnonzero(labels == FOREGROUND)
    if fg_idx.size:
        targets[fg_idx] = encode_boxes(gt[matched[fg_idx]], anchors[fg_idx])
    return AnchorLabels(labels, matched, targets)


def encode_boxes(gt_boxes, anchors) -> np.ndarray:
    """Center/log-size deltas (tx, ty, tw, th) taking each anchor to its gt."""
    gt = as_boxes(gt_boxes)
    anc = as_boxes(anchors)
    aw = anc[:, 2] - anc[:, 0]
    ah = anc[:, 3] - anc[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor width and height must be positive")
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("ground-truth width and height must be positive")
    acx = anc[:, 0] + aw / 2
    acy = anc[:, 1] + ah / 2
    gcx = gt[:, 0] + gw / 2
    gcy = gt[:, 1] + gh / 2
    return np.stack([(gcx - acx) / aw,
                     (gcy - acy) / ah,
                     np.log(gw / aw),
                     np.log(gh / ah)], axis=1)


def encode_box(gt, anchor) -> np.ndarray:
    """Single-box encode_boxes; returns a (4,) delta vector."""
    return encode_boxes(as_boxes(gt), as_boxes(anchor))[0]


def decode_boxes(deltas, anchors,
                 max_log_size: float = MAX_LOG_SIZE_DELTA) -> np.ndarray:
    """Inverse of encode_boxes, with log-size deltas clamped to +-max_log_size."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anc = as_boxes(anchors)
    aw = anc[:, 2] - anc[:, 0]
    ah = anc[:, 3] - anc[:, 1]
    acx = anc[:, 0] + aw / 2
    acy = anc[:, 1] + ah / 2
    cx = d[:, 0] * aw + acx
    cy = d[:, 1] * ah + acy
    w = np.exp(np.clip(d[:, 2], -max_log_size, max_log_size)) * aw
    h = np.exp(np.clip(d[:, 3], -max_log_size, max_log_size)) * ah
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    # Re-normalize so x1 <= x2, y1 <= y2 even for degenerate inputs.
    x1 = np.minimum(boxes[:, 0], boxes[:, 2])
    x2 = np.maximum(boxes[:, 0], boxes[:, 2])
    y1 = np.minimum(boxes[:, 1], boxes[:, 3])
    y2 = np.maximum(boxes[:, 1], boxes[:, 3])
    return np.stack([x1, y1, x2, y2], axis=1)


def decode_box(deltas, anchor,
               max_log_size: float = MAX_LOG_SIZE_DELTA) -> np.ndarray:
    """Single-box decode_boxes; returns a (4,) box."""
    return decode_boxes(np.asarray(deltas).reshape(1, 4), as_boxes(anchor),
                        max_log_size)[0]


def nms(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and discards every
    remaining box whose IoU with it exceeds iou_thresh. Score ties break
    toward the lower original index. Returns kept indices in descending
    score order; empty input yields an empty array.
    """
    boxes = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores must have equal length")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)

    order = np.argsort(-scores, kind="stable")
    areas = box_area(boxes)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0.0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0)
        order = rest[overlap <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    """Intersect boxes with the image rectangle [0, width] x [0, height]."""
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0.0, float(width))
    b[:, 1::2] = np.clip(b[:, 1::2], 0.0, float(height))
    return b


def clip_box(box, width: float, height: float) -> np.ndarray:
    return clip_boxes(as_boxes(box), width, height)[0]


def filter_degenerate(boxes, min_side: float) -> np.ndarray:
    """Indices of boxes whose width and height are both >= min_side."""
    b = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return np.flatnonzero((w >= min_side) & (h >= min_side))
