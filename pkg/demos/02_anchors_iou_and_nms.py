"""
Anchor grids, IoU matching, box coding, and non-maximum suppression
===================================================================

"""

# The region proposal stage reasons about a dense grid of candidate
# boxes (anchors) tiled over the feature map. Nine anchors per cell:
# three scales crossed with three aspect ratios.
import numpy as np
from mitodet import geometry

grid = geometry.generate_anchors(
    feature_h=4, feature_w=4, stride=16.0,
    scales=(32, 64, 128), ratios=(0.5, 1.0, 2.0))
print("anchors:", grid.anchors.shape, "cells:", grid.cells)

# Anchors are flattened cell-major: all nine anchors of cell (0, 0),
# then cell (0, 1), and so on. cell_index/scale_of/ratio_of record the
# provenance of every row.
print("first cell rows:", grid.cell_index[:9].tolist())
print("scales of first three:", grid.scale_of[:3].tolist())

# IoU is the workhorse of matching. A box against itself scores 1,
# disjoint boxes score 0, and a half-overlap scores 1/3.
a = np.array([0.0, 0.0, 10.0, 10.0])
print("iou(a, a) =", geometry.iou(a, a))
print("iou(a, shifted) =", geometry.iou(a, np.array([5.0, 0.0, 15.0, 10.0])))

# Training labels for the proposal network come from IoU against the
# ground truth: above 0.5 is foreground, at or below 0.1 is background,
# the band in between is ignored. Every ground-truth box additionally
# claims its single best-overlapping anchor so nothing goes unmatched.
gt = np.array([[20.0, 20.0, 44.0, 44.0]])
labels = geometry.assign_anchor_labels(grid.anchors, gt)
print("fg:", int((labels.labels == geometry.FOREGROUND).sum()),
      "bg:", int((labels.labels == geometry.BACKGROUND).sum()),
      "ignored:", int((labels.labels == geometry.IGNORE).sum()))

# Regression targets use the usual center/log-size parameterization.
# encode followed by decode reconstructs the ground truth exactly.
fg = labels.labels == geometry.FOREGROUND
deltas = geometry.encode_boxes(gt[labels.matched_gt[fg]], grid.anchors[fg])
recovered = geometry.decode_boxes(deltas, grid.anchors[fg])
print("round-trip error:", float(np.abs(recovered - gt).max()))

# Non-maximum suppression keeps the highest-scoring box of every
# overlapping cluster. Ties on score resolve to the lower index, which
# keeps results deterministic.
boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [30, 30, 40, 40]], float)
scores = np.array([0.9, 0.8, 0.7])
keep = geometry.nms(boxes, scores, iou_thresh=0.5)
print("nms keeps rows:", keep.tolist())
