"""
The two-stream detector: proposals, bilinear fusion, detection
==============================================================

"""

# The detector runs two convolutional streams with identical topology:
# one over the RGB tile, one over the segmentation probability map. The
# RGB stream alone drives region proposals and box regression; the
# classifier sees the bilinear fusion of both streams.
import numpy as np
import torch
from mitodet import data, detector, geometry

frames = data.generate_synthetic_dataset(
    num_frames=2, frame_width=128, frame_height=128,
    blobs_per_frame=3, grid=2, tile_margin=8.0, min_separation=20.0,
    seed=0)
tiles = []
for frame in frames:
    tiles.extend(data.tile_frame_with_annotations(
        frame, grid=2, scale=1.0, box_half_side=10.0))

# Stand-in masks: the ground-truth discs, as if segmentation were
# perfect. In the real pipeline these are U-net outputs.
masks = [data.synth_mask(*t.image.shape[:2], t.gt_centroids,
                         disc_radius=7.0).astype(np.float64)
         for t in tiles]

cfg = detector.DetectorConfig(
    backbone_channels=8,
    rpn=detector.RpnConfig(hidden_channels=16, post_nms_top_k=50),
    roi=detector.RoiConfig(pool_size=3, samples_per_image=16),
    anchors=detector.AnchorConfig(scales=(10.0, 16.0, 24.0)),
    steps=200, learning_rate=0.03, seed=0)
model = detector.TwoStreamDetector(cfg)

# Both streams downsample by the same stride, so their feature maps
# align cell for cell and RoIs can be pooled from either one.
tile = next(t for t in tiles if len(t.gt_centroids))
mask = masks[tiles.index(tile)]
f_rgb, f_seg = model.stream_features(tile.image, mask)
print("stride:", model.stride, "feature maps:", tuple(f_rgb.shape),
      tuple(f_seg.shape))

# The proposal network scores every anchor and regresses a correction.
# propose_regions decodes, clips, filters and NMS-prunes those into a
# ranked shortlist of candidate boxes. Untrained it is just a coarse
# covering of the tile; training sharpens it onto the blobs.
with torch.no_grad():
    obj_logits, deltas = model.rpn(f_rgb)
grid = model.anchor_grid_for(f_rgb.shape[-2], f_rgb.shape[-1])
props, scores = detector.propose_regions(
    obj_logits.numpy(), deltas.numpy(), grid,
    tile.image.shape[1], tile.image.shape[0], cfg.rpn, cfg.min_box_side)
print("proposals:", props.shape, "best gt coverage (untrained):",
      round(max(geometry.iou(p, tile.gt_boxes[0]) for p in props), 3))

# Bilinear fusion takes the outer product of the two pooled RoI feature
# vectors, then signed-sqrt and L2 normalization. With C channels per
# stream the fused descriptor has C*C entries (a compact sketched
# variant is available for wide backbones). Pooling over the blob's own
# box shows a live descriptor; an RoI whose mask crop is empty fuses to
# the zero vector, which is exactly how the segmentation stream vetoes
# proposals over plain tissue.
with torch.no_grad():
    rois = np.vstack([tile.gt_boxes[:1], props[:3]])
    fused = model.fusion(model.roi_blocks(f_rgb, rois),
                         model.roi_blocks(f_seg, rois))
print("fused descriptors:", tuple(fused.shape), "norms:",
      [round(float(v.norm()), 3) for v in fused])

# A short joint training run: one SGD step per tile, losses recorded
# per step (rpn objectness+regression, mitosis cross-entropy, bbox
# refinement).
model, history = detector.train_detector(tiles, masks, cfg, model=model)
print("loss first -> last:", round(history[0]["total"], 3),
      "->", round(history[-1]["total"], 3))

# Detection on one tile: propose, pool from both streams, classify the
# fused descriptor, refine boxes, threshold and final NMS. Short runs
# like this typically keep a duplicate or two that longer training
# would regress onto the same box and suppress.
boxes, det_scores = detector.detect_tile(model, tile.image, mask)
print("detections:", len(boxes), "for", len(tile.gt_centroids),
      "ground truths in this tile")

# Detections map back to frame coordinates through the tile's offset
# and zoom, ready for the centroid-matching evaluation.
for det in detector.detections_to_frame(tile, boxes, det_scores):
    print("  frame", det.frame_id, "centroid",
          tuple(round(c, 1) for c in det.centroid),
          "score", round(det.score, 3))
