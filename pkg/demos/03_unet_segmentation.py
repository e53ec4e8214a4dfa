"""
Training the U-net segmentation stream on blob tiles
====================================================

"""

# The detector's second stream is the probability map of a small U-net
# trained to paint discs over mitosis centroids. This script overfits a
# tiny U-net on a handful of synthetic tiles and probes the result.
import numpy as np
import torch
from mitodet import data, unet

frames = data.generate_synthetic_dataset(
    num_frames=2, frame_width=128, frame_height=128,
    blobs_per_frame=3, grid=2, tile_margin=8.0, min_separation=20.0,
    seed=0)
tiles = []
for frame in frames:
    tiles.extend(data.tile_frame_with_annotations(
        frame, grid=2, scale=1.0, box_half_side=10.0))
targets = [data.make_seg_target(t, mask_radius=7.0) for t in tiles]
print("tiles:", len(tiles),
      "with blobs:", sum(1 for t in tiles if len(t.gt_centroids)))

# depth counts pooling stages; base_channels the width of the first
# encoder block. Two levels and eight channels are plenty for blobs.
cfg = unet.UnetConfig(depth=2, base_channels=8, iterations=30,
                      learning_rate=0.01, batch_size=4, seed=0)
model, losses = unet.train_unet(tiles, targets, cfg)
print("epoch loss first -> last:",
      round(losses[0], 4), "->", round(losses[-1], 4))

# Momentum SGD at 0.01 settles quickly here. Much higher rates
# overshoot into predicting the background base rate everywhere, so the
# loss plateaus near the positive-pixel fraction instead of reaching
# zero: worth remembering when a segmentation run refuses to converge.
assert losses[-1] < losses[0]

# predict_mask runs a tile through the network and returns per-pixel
# mitosis probabilities at tile resolution.
blob_tile = next(t for t in tiles if len(t.gt_centroids))
mask = unet.predict_mask(model, blob_tile)
u, v = blob_tile.gt_centroids[0]
print("probability at a blob center:",
      round(float(mask.prob[int(v), int(u)]), 3))
print("probability at the far corner:",
      round(float(mask.prob[0, 0]), 3))

# Checkpoints carry the architecture config, so loading needs no
# external knowledge of how the network was built.
import tempfile, pathlib
path = pathlib.Path(tempfile.mkdtemp()) / "unet.pt"
unet.save_unet(model, path, iterations_trained=cfg.iterations)
reloaded, meta = unet.load_unet(path)
with torch.no_grad():
    x = unet.image_to_input(blob_tile.image)
    same = torch.equal(model(x), reloaded(x))
print("reloaded checkpoint reproduces outputs:", same,
      "| meta:", {k: meta[k] for k in ("iterations_trained",)})
